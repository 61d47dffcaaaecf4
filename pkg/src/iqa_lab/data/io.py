"""Image file I/O. Images are float32 HWC RGB arrays in [0, 1]."""
import os

import numpy as np
from PIL import Image

from ..errors import MissingFile


def load_image(path):
    if not os.path.exists(path):
        raise MissingFile(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def to_uint8(img):
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)
