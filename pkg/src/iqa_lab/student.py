"""No-reference student: classifier trunk -> pooled vector -> linear MOS head.

``tiny_desk`` is a small trainable conv stack for desk-scale runs.
``efficientnet_b0`` uses torchvision's architecture; ImageNet weights are an
external artifact (``weights_path``), torchvision is imported lazily.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import Tensor, nn

from .errors import InputSizeMismatch, MissingFile

STUDENT_KINDS = ("tiny_desk", "efficientnet_b0")


@dataclass(frozen=True)
class StudentSpec:
    kind: str = "tiny_desk"
    input_size: int = 64
    channels: Tuple[int, ...] = (16, 32, 64, 64)
    dropout: float = 0.0
    weights_path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in STUDENT_KINDS:
            raise ValueError(f"unknown student kind {self.kind!r}")
        object.__setattr__(self, "channels", tuple(self.channels))


class TinyTrunk(nn.Module):
    def __init__(self, channels):
        super().__init__()
        layers, cin = [], 3
        for i, c in enumerate(channels):
            layers += [nn.Conv2d(cin, c, 3, stride=2 if i < 3 else 1, padding=1, bias=False),
                       nn.BatchNorm2d(c), nn.ReLU(inplace=True)]
            cin = c
        self.features = nn.Sequential(*layers)
        self.out_dim = cin

    def forward(self, x):
        return self.features(x)


class NRStudent(nn.Module):
    def __init__(self, spec: StudentSpec, trunk: nn.Module, feat_dim: int):
        super().__init__()
        self.spec = spec
        self.trunk = trunk
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.drop = nn.Dropout(spec.dropout)
        self.head = nn.Linear(feat_dim, 1)
        if spec.kind == "tiny_desk":
            mean, std = (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)
        else:
            mean, std = (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1), persistent=False)

    def features(self, x: Tensor) -> Tensor:
        return self.pool(self.trunk((x - self.mean) / self.std)).flatten(1)

    def forward(self, x: Tensor) -> Tensor:
        """(B, 3, S, S) distorted image in [0, 1] -> (B,) standardized MOS."""
        if x.shape[-1] != self.spec.input_size or x.shape[-2] != self.spec.input_size:
            raise InputSizeMismatch(f"student expects {self.spec.input_size}px crops, got {tuple(x.shape[-2:])}")
        return self.head(self.drop(self.features(x))).squeeze(-1)


def _efficientnet_trunk(spec, allow_random):
    import torchvision

    net = torchvision.models.efficientnet_b0(weights=None)
    if spec.weights_path:
        sd = torch.load(spec.weights_path, map_location="cpu", weights_only=True)
        sd = {k: v for k, v in sd.items() if not k.startswith("classifier.")}
        net.load_state_dict(sd, strict=False)
    elif not allow_random:
        raise MissingFile("efficientnet_b0 student needs weights_path (ImageNet weights artifact)")
    return net.features, 1280


def build_student(spec: StudentSpec, seed: Optional[int] = None, allow_random=True) -> NRStudent:
    if seed is not None:
        torch.manual_seed(seed)
    if spec.kind == "tiny_desk":
        trunk = TinyTrunk(spec.channels)
        return NRStudent(spec, trunk, trunk.out_dim)
    trunk, dim = _efficientnet_trunk(spec, allow_random)
    return NRStudent(spec, trunk, dim)
