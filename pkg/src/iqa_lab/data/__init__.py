from .augment import (AugmentationSpec, ColorJitter, CutOut, augment, base_augmentation,
                      center_crop, extra_augmentation, identity_augmentation)
from .distortions import register_degradation, synthesize_distortions
from .io import load_image, save_image
from .manifest import (MOSNormalizer, SampleRecord, destandardize_mos, load_manifest,
                       save_manifest, split_train_val, standardize_mos)

__all__ = [
    "AugmentationSpec", "ColorJitter", "CutOut", "MOSNormalizer", "SampleRecord", "augment",
    "base_augmentation", "center_crop", "destandardize_mos", "extra_augmentation",
    "identity_augmentation", "load_image", "load_manifest", "register_degradation",
    "save_image", "save_manifest", "split_train_val", "standardize_mos",
    "synthesize_distortions",
]
