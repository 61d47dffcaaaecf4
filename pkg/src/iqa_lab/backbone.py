"""Frozen CNN feature extractors with named intermediate taps.

Two kinds are available:

``pretrained_external``
    Inception-ResNet-v2 up to ``block35_10`` (stem, ``mixed5b`` and ten
    Block35 units). Parameter names follow timm's ``inception_resnet_v2`` so a
    state_dict exported from there loads directly. Weights come from an
    external file; a ``<file>.taps.json`` manifest next to it lists the tap
    names the artifact supports.

``tiny_desk``
    Four 3x3 conv blocks with strides (2, 2, 2, 1) and channels
    (16, 32, 48, 48), ~40k parameters, initialized from a fixed seed. Taps
    ``block3`` and ``block4`` both sit at stride 8, so a 64x64 input gives an
    8x8 grid with 96 channels.
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import Tensor, nn

from .errors import InputSizeMismatch, MissingFile, ShapeMismatch, UnknownTap

log = logging.getLogger(__name__)

CACHE_ENV = "IQA_LAB_CACHE"
TRUNK_FILENAME = "inception_resnet_v2_trunk.pt"
INCEPTION_TAPS = ("mixed5b", "block35_2", "block35_4", "block35_6", "block35_8", "block35_10")
TINY_TAPS = ("block3", "block4")
TINY_SEED = 1234


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "tiny_desk"
    taps: Tuple[str, ...] = TINY_TAPS
    frozen: bool = True
    input_size: int = 64
    weights_path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("pretrained_external", "tiny_desk"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if not self.taps:
            raise ValueError("tap list must be non-empty")


def inception_backbone_spec(weights_path=None):
    return BackboneSpec("pretrained_external", INCEPTION_TAPS, True, 192, weights_path)


def tiny_backbone_spec(input_size=64):
    return BackboneSpec("tiny_desk", TINY_TAPS, True, input_size)


@dataclass
class FeatureStack:
    """Channel-concatenated tap outputs, shape (B, C_total, h, w)."""

    grid: Tensor
    tap_channels: Tuple[int, ...]
    source: str = "ref"

    def __post_init__(self):
        if self.source not in ("ref", "dist", "diff"):
            raise ValueError(f"bad source {self.source!r}")
        if self.grid.dim() != 4 or self.grid.shape[1] != sum(self.tap_channels):
            raise ShapeMismatch(f"grid {tuple(self.grid.shape)} does not match tap channels {self.tap_channels}")

    @property
    def spatial(self):
        return tuple(self.grid.shape[-2:])


def diff_stack(f_ref: FeatureStack, f_dist: FeatureStack) -> FeatureStack:
    """``f_ref - f_dist``, tagged as a difference stack."""
    if f_ref.grid.shape != f_dist.grid.shape or f_ref.tap_channels != f_dist.tap_channels:
        raise ShapeMismatch(f"cannot diff {tuple(f_ref.grid.shape)} and {tuple(f_dist.grid.shape)}")
    if (f_ref.source, f_dist.source) != ("ref", "dist"):
        raise ValueError(f"expected (ref, dist) stacks, got ({f_ref.source}, {f_dist.source})")
    return FeatureStack(f_ref.grid - f_dist.grid, f_ref.tap_channels, "diff")


class PointwiseProjection(nn.Module):
    """1x1 convolution C_total -> D; spatial layout untouched."""

    def __init__(self, in_channels, out_dim):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, out_dim, kernel_size=1)

    def forward(self, stack):
        grid = stack.grid if isinstance(stack, FeatureStack) else stack
        if grid.shape[1] != self.in_channels:
            raise ShapeMismatch(f"projection expects {self.in_channels} channels, got {grid.shape[1]}")
        out = self.conv(grid)
        if isinstance(stack, FeatureStack):
            return FeatureStack(out, (out.shape[1],), stack.source)
        return out

    @torch.no_grad()
    def init_identity(self):
        if self.conv.out_channels != self.in_channels:
            raise ShapeMismatch("identity init needs out_dim == in_channels")
        self.conv.weight.copy_(torch.eye(self.in_channels).view_as(self.conv.weight))
        self.conv.bias.zero_()


def project(stack, projection):
    return projection(stack)


class Backbone(nn.Module):
    """Runs ``layers`` in order and concatenates the requested taps.

    Subclasses fill ``self.layers`` (an ``nn.ModuleDict`` keyed by tap name)
    and set ``mean``/``std`` for input normalization. Inputs are (B, 3, H, W)
    in [0, 1].
    """

    mean = (0.5, 0.5, 0.5)
    std = (0.5, 0.5, 0.5)

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.register_buffer("_mean", torch.tensor(self.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("_std", torch.tensor(self.std).view(1, 3, 1, 1), persistent=False)

    def _check_taps(self):
        names = list(self.layers.keys())
        unknown = [t for t in self.spec.taps if t not in names]
        if unknown:
            raise UnknownTap(f"unknown taps {unknown}; available: {names}")
        self._last = max(names.index(t) for t in self.spec.taps)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # a frozen extractor always runs with eval-mode batch norm
        return super().train(mode and not self.spec.frozen)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tuple[int, ...]]:
        s = self.spec.input_size
        if x.shape[-2:] != (s, s):
            raise InputSizeMismatch(f"backbone expects {s}x{s} input, got {tuple(x.shape[-2:])}")
        h = (x - self._mean.to(x.dtype)) / self._std.to(x.dtype)
        outs = []
        for i, (name, layer) in enumerate(self.layers.items()):
            h = layer(h)
            if name in self.spec.taps:
                outs.append(h)
            if i == self._last:
                break
        shapes = {tuple(o.shape[-2:]) for o in outs}
        if len(shapes) != 1:
            raise ShapeMismatch(f"taps {self.spec.taps} produce different spatial sizes {sorted(shapes)}")
        return torch.cat(outs, dim=1), tuple(o.shape[1] for o in outs)

    def extract(self, x: Tensor, source="ref") -> FeatureStack:
        if self.spec.frozen:
            with torch.no_grad():
                grid, chans = self(x)
        else:
            grid, chans = self(x)
        return FeatureStack(grid, chans, source)

    @torch.no_grad()
    def probe(self):
        """(tap_channels, (h, w)) for the configured input size."""
        p = next(self.parameters())
        x = torch.zeros(1, 3, self.spec.input_size, self.spec.input_size, dtype=p.dtype)
        was = self.training
        self.eval()
        grid, chans = self(x)
        self.train(was)
        return chans, tuple(grid.shape[-2:])


def extract_features(image, backbone, source="ref"):
    return backbone.extract(image, source)


def _conv_block(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU())


class TinyDeskBackbone(Backbone):
    mean = (0.5, 0.5, 0.5)
    std = (0.25, 0.25, 0.25)
    channels = (16, 32, 48, 48)
    strides = (2, 2, 2, 1)

    def __init__(self, spec: BackboneSpec, seed=TINY_SEED):
        super().__init__(spec)
        cin = 3
        layers = {}
        for i, (c, s) in enumerate(zip(self.channels, self.strides), start=1):
            layers[f"block{i}"] = _conv_block(cin, c, s)
            cin = c
        self.layers = nn.ModuleDict(layers)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        self._check_taps()


# Inception-ResNet-v2 trunk. Module names mirror timm.

class BasicConv2d(nn.Module):
    def __init__(self, cin, cout, kernel_size, stride=1, padding=0):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size, stride=stride, padding=padding, bias=False)
        self.bn = nn.BatchNorm2d(cout, eps=0.001)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Mixed5b(nn.Module):
    def __init__(self):
        super().__init__()
        self.branch0 = BasicConv2d(192, 96, 1)
        self.branch1 = nn.Sequential(BasicConv2d(192, 48, 1), BasicConv2d(48, 64, 5, padding=2))
        self.branch2 = nn.Sequential(BasicConv2d(192, 64, 1), BasicConv2d(64, 96, 3, padding=1),
                                     BasicConv2d(96, 96, 3, padding=1))
        self.branch3 = nn.Sequential(nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False),
                                     BasicConv2d(192, 64, 1))

    def forward(self, x):
        return torch.cat([self.branch0(x), self.branch1(x), self.branch2(x), self.branch3(x)], 1)


class Block35(nn.Module):
    def __init__(self, scale=0.17):
        super().__init__()
        self.scale = scale
        self.branch0 = BasicConv2d(320, 32, 1)
        self.branch1 = nn.Sequential(BasicConv2d(320, 32, 1), BasicConv2d(32, 32, 3, padding=1))
        self.branch2 = nn.Sequential(BasicConv2d(320, 32, 1), BasicConv2d(32, 48, 3, padding=1),
                                     BasicConv2d(48, 64, 3, padding=1))
        self.conv2d = nn.Conv2d(128, 320, 1)
        self.act = nn.ReLU()

    def forward(self, x):
        out = torch.cat([self.branch0(x), self.branch1(x), self.branch2(x)], 1)
        return self.act(self.conv2d(out) * self.scale + x)


class _Stem(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv2d_1a = BasicConv2d(3, 32, 3, stride=2)
        self.conv2d_2a = BasicConv2d(32, 32, 3)
        self.conv2d_2b = BasicConv2d(32, 64, 3, padding=1)
        self.maxpool_3a = nn.MaxPool2d(3, stride=2)
        self.conv2d_3b = BasicConv2d(64, 80, 1)
        self.conv2d_4a = BasicConv2d(80, 192, 3)
        self.maxpool_5a = nn.MaxPool2d(3, stride=2)

    def forward(self, x):
        for m in self.children():
            x = m(x)
        return x


class InceptionResNetV2Trunk(Backbone):
    def __init__(self, spec: BackboneSpec):
        super().__init__(spec)
        layers = {"stem": _Stem(), "mixed5b": Mixed5b()}
        for i in range(1, 11):
            layers[f"block35_{i}"] = Block35()
        self.layers = nn.ModuleDict(layers)
        self._check_taps()

    def timm_state_dict_keys(self):
        """Map our parameter names to timm's."""
        out = {}
        for k in self.state_dict():
            name = k[len("layers."):]
            if name.startswith("stem."):
                name = name[len("stem."):]
            elif name.startswith("mixed5b."):
                name = "mixed_5b." + name[len("mixed5b."):]
            elif name.startswith("block35_"):
                idx, rest = name[len("block35_"):].split(".", 1)
                name = f"repeat.{int(idx) - 1}.{rest}"
            out[k] = name
        return out

    def load_timm_state_dict(self, sd):
        mapping = self.timm_state_dict_keys()
        missing = [v for v in mapping.values() if v not in sd]
        if missing:
            raise ShapeMismatch(f"weight artifact lacks {len(missing)} trunk tensors, e.g. {missing[:3]}")
        self.load_state_dict({k: sd[v] for k, v in mapping.items()})


def resolve_weights_path(spec):
    if spec.weights_path:
        return spec.weights_path
    cache = os.environ.get(CACHE_ENV)
    return os.path.join(cache, TRUNK_FILENAME) if cache else None


def read_tap_manifest(weights_path):
    path = weights_path + ".taps.json"
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def build_backbone(spec: BackboneSpec, allow_random=False) -> Backbone:
    """Instantiate (and for the external kind, load) a backbone.

    ``allow_random`` lets the external architecture run without its weight
    artifact, which is enough for shape checks but not for real predictions.
    """
    if spec.kind == "tiny_desk":
        net = TinyDeskBackbone(spec)
    else:
        net = InceptionResNetV2Trunk(spec)
        path = resolve_weights_path(spec)
        if path and os.path.exists(path):
            manifest = read_tap_manifest(path)
            if manifest is not None:
                unknown = [t for t in spec.taps if t not in manifest.get("taps", [])]
                if unknown:
                    raise UnknownTap(f"taps {unknown} not listed in {path}.taps.json")
            sd = torch.load(path, map_location="cpu", weights_only=True)
            if any(k.startswith("layers.") for k in sd):
                net.load_state_dict(sd)
            else:
                net.load_timm_state_dict(sd)
        elif not allow_random:
            raise MissingFile(f"backbone weight artifact not found (weights_path={spec.weights_path!r}, "
                              f"${CACHE_ENV}={os.environ.get(CACHE_ENV)!r})")
        else:
            log.warning("building %s without weights; features are random", spec.kind)
    if spec.frozen:
        net.freeze()
    return net


def export_trunk_from_timm(out_path, pretrained=True):
    """Write a trunk artifact and tap manifest from timm's Inception-ResNet-v2.

    Needs ``timm`` (and network access for pretrained weights).
    """
    import timm

    model = timm.create_model("inception_resnet_v2", pretrained=pretrained)
    trunk = InceptionResNetV2Trunk(inception_backbone_spec())
    trunk.load_timm_state_dict(model.state_dict())
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    torch.save(trunk.state_dict(), out_path)
    taps = list(trunk.layers.keys())[1:]
    with open(out_path + ".taps.json", "w", encoding="utf-8") as fh:
        json.dump({"architecture": "inception_resnet_v2", "taps": taps,
                   "channels": {t: 320 for t in taps}, "input_size": 192}, fh, indent=2)
    return out_path
