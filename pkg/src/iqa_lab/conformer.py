"""Conformer encoder-decoder regression head for full-reference IQA.

Wiring (default ``diff_enc_ref_dec``): the encoder runs over the projected
difference features, the decoder over ``[quality token; projected reference
features]`` with cross-attention into the encoder memory, and the quality
token's final state is mapped to a standardized MOS by a small MLP.

Tokens are kept as (B, N, D) sequences, N = h * w in row-major grid order,
and reshaped to (B, D, h, w) only for the depthwise convolution.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .backbone import FeatureStack, PointwiseProjection, diff_stack
from .errors import NonFiniteActivation, ShapeMismatch

WIRINGS = ("diff_enc_ref_dec", "concat_all_enc")


@dataclass(frozen=True)
class ConformerConfig:
    num_blocks: int = 1
    dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    conv_kernel: int = 7
    grid: Tuple[int, int] = (21, 21)
    dropout: float = 0.1
    # hidden width of the MOS head MLP; None -> single linear layer
    mlp_head_dim: Optional[int] = 128
    # per-head attention width; None -> dim // heads
    attn_head_dim: Optional[int] = None
    wiring: str = "diff_enc_ref_dec"
    cross_attn_norm: bool = False
    share_projection: bool = True
    # normalization inside the conv module: "batch" or "layer" (per position)
    conv_norm: str = "batch"

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.attn_head_dim is None and self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.wiring not in WIRINGS:
            raise ValueError(f"wiring must be one of {WIRINGS}")
        if self.conv_norm not in ("batch", "layer"):
            raise ValueError("conv_norm must be 'batch' or 'layer'")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        object.__setattr__(self, "grid", tuple(self.grid))

    @property
    def head_dim(self):
        return self.attn_head_dim or self.dim // self.heads

    @property
    def num_tokens(self):
        return self.grid[0] * self.grid[1]


def full_config(**overrides):
    """L=1, D=128, H=4, D_feat=512, D_head=128 on the 21x21 grid."""
    return ConformerConfig(**overrides)


def tiny_config(**overrides):
    base = dict(num_blocks=1, dim=16, heads=2, ffn_dim=32, conv_kernel=3, grid=(8, 8),
                dropout=0.0, mlp_head_dim=16)
    base.update(overrides)
    return ConformerConfig(**base)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.fc2(self.drop(F.silu(self.fc1(self.norm(x))))))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads, head_dim, dropout):
        super().__init__()
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.q = nn.Linear(dim, inner)
        self.k = nn.Linear(dim, inner)
        self.v = nn.Linear(dim, inner)
        self.out = nn.Linear(inner, dim)
        self.drop = nn.Dropout(dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, context=None):
        context = query if context is None else context
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = self.drop(attn.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.drop(self.out(out))


class ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over channels at every grid position of a (B, C, h, w) map."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ConvModule(nn.Module):
    """Pointwise -> GLU -> depthwise kxk -> norm -> swish -> pointwise, on the grid."""

    def __init__(self, dim, kernel, dropout, norm="batch"):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Conv2d(dim, 2 * dim, 1)
        self.dw = nn.Conv2d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        # both options carry 2 * dim parameters
        self.bn = nn.BatchNorm2d(dim) if norm == "batch" else ChannelLayerNorm(dim)
        self.pw2 = nn.Conv2d(dim, dim, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, grid):
        b, n, d = x.shape
        h, w = grid
        if n != h * w:
            raise ShapeMismatch(f"{n} tokens do not fill a {h}x{w} grid")
        y = self.norm(x).transpose(1, 2).reshape(b, d, h, w)
        y = F.glu(self.pw1(y), dim=1)
        y = self.pw2(F.silu(self.bn(self.dw(y))))
        return self.drop(y.reshape(b, d, n).transpose(1, 2))


class AttentionModule(nn.Module):
    def __init__(self, cfg, norm=True):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.dim) if norm else nn.Identity()
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.head_dim, cfg.dropout)

    def forward(self, x, context=None):
        return self.attn(self.norm(x), context)


class ConformerBlock(nn.Module):
    """Macaron block: x + FF/2, + MHSA, + Conv, + FF/2, then LayerNorm."""

    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.ff1 = FeedForward(cfg.dim, cfg.ffn_dim, cfg.dropout)
        self.self_attn = AttentionModule(cfg)
        self.conv = ConvModule(cfg.dim, cfg.conv_kernel, cfg.dropout, cfg.conv_norm)
        self.ff2 = FeedForward(cfg.dim, cfg.ffn_dim, cfg.dropout)
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, x, grid):
        x = x + 0.5 * self.ff1(x)
        x = x + self.self_attn(x)
        x = x + self.conv(x, grid)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


class ConformerDecoderBlock(nn.Module):
    """Conformer block with cross-attention after self-attention.

    Token 0 is the quality token; it joins self- and cross-attention and the
    feed-forward halves but skips the grid convolution. The convolution runs
    before attention so its output can reach token 0; placed after attention,
    only per-token layers would follow it and it would never affect the score.
    """

    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.ff1 = FeedForward(cfg.dim, cfg.ffn_dim, cfg.dropout)
        self.self_attn = AttentionModule(cfg)
        self.cross_attn = AttentionModule(cfg, norm=cfg.cross_attn_norm)
        self.conv = ConvModule(cfg.dim, cfg.conv_kernel, cfg.dropout, cfg.conv_norm)
        self.ff2 = FeedForward(cfg.dim, cfg.ffn_dim, cfg.dropout)
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, x, memory, grid):
        x = x + 0.5 * self.ff1(x)
        x = torch.cat([x[:, :1], x[:, 1:] + self.conv(x[:, 1:], grid)], dim=1)
        x = x + self.self_attn(x)
        x = x + self.cross_attn(x, memory)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


def conformer_block(x, block, grid):
    return block(x, grid)


def grid_to_tokens(t):
    b, d, h, w = t.shape
    return t.reshape(b, d, h * w).transpose(1, 2)


def _check_finite(t, where):
    if not torch.isfinite(t).all():
        raise NonFiniteActivation(f"non-finite activation after {where}")


class IQAConformer(nn.Module):
    """Full-reference IQA model: frozen backbone + trainable conformer head.

    ``backbone`` may be None, in which case only :meth:`forward_features` is
    usable and ``in_channels`` must be given.
    """

    def __init__(self, cfg: ConformerConfig, backbone=None, in_channels=None):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone
        if backbone is not None:
            chans, grid = backbone.probe()
            if tuple(grid) != cfg.grid:
                raise ShapeMismatch(f"backbone grid {grid} != configured grid {cfg.grid}")
            in_channels = sum(chans)
        if in_channels is None:
            raise ValueError("in_channels required without a backbone")
        self.in_channels = in_channels
        d = cfg.dim
        if cfg.wiring == "diff_enc_ref_dec":
            self.proj = PointwiseProjection(in_channels, d)
            self.proj_ref = None if cfg.share_projection else PointwiseProjection(in_channels, d)
        else:
            self.proj = PointwiseProjection(3 * in_channels, d)
            self.proj_ref = PointwiseProjection(in_channels, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.num_tokens, d))
        self.quality_token = nn.Parameter(torch.zeros(1, 1, d))
        self.encoder = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.num_blocks))
        self.decoder = nn.ModuleList(ConformerDecoderBlock(cfg) for _ in range(cfg.num_blocks))
        if cfg.mlp_head_dim:
            self.head = nn.Sequential(nn.Linear(d, cfg.mlp_head_dim), nn.GELU(), nn.Linear(cfg.mlp_head_dim, 1))
        else:
            self.head = nn.Linear(d, 1)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.quality_token, std=0.02)

    def head_state_dict(self):
        return OrderedDict((k, v) for k, v in self.state_dict().items() if not k.startswith("backbone."))

    def load_head_state_dict(self, sd):
        missing, unexpected = self.load_state_dict(sd, strict=False)
        missing = [k for k in missing if not k.startswith("backbone.")]
        if missing or unexpected:
            raise ShapeMismatch(f"checkpoint mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")

    def _ref_projection(self):
        return self.proj_ref if self.proj_ref is not None else self.proj

    def embed(self, f_ref: FeatureStack, f_dist: FeatureStack):
        """Projected encoder and decoder token sequences, position embeddings added."""
        f_diff = diff_stack(f_ref, f_dist)
        if tuple(f_diff.spatial) != self.cfg.grid:
            raise ShapeMismatch(f"feature grid {f_diff.spatial} != configured grid {self.cfg.grid}")
        if self.cfg.wiring == "diff_enc_ref_dec":
            enc_in = self.proj(f_diff.grid)
        else:
            enc_in = self.proj(torch.cat([f_ref.grid, f_dist.grid, f_diff.grid], dim=1))
        enc = grid_to_tokens(enc_in) + self.pos_embed[:, 1:]
        ref = grid_to_tokens(self._ref_projection()(f_ref.grid))
        q = self.quality_token.expand(ref.shape[0], -1, -1)
        dec = torch.cat([q, ref], dim=1) + self.pos_embed
        return enc, dec

    def encode(self, tokens):
        for blk in self.encoder:
            tokens = blk(tokens, self.cfg.grid)
        _check_finite(tokens, "encoder")
        return tokens

    def decode(self, tokens, memory):
        for blk in self.decoder:
            tokens = blk(tokens, memory, self.cfg.grid)
        _check_finite(tokens, "decoder")
        return self.head(tokens[:, 0]).squeeze(-1)

    def forward_features(self, f_ref: FeatureStack, f_dist: FeatureStack) -> Tensor:
        enc, dec = self.embed(f_ref, f_dist)
        return self.decode(dec, self.encode(enc))

    def forward(self, ref: Tensor, dist: Tensor) -> Tensor:
        """(B, 3, S, S) image pair in [0, 1] -> (B,) standardized MOS."""
        if self.backbone is None:
            raise RuntimeError("model built without a backbone; use forward_features")
        return self.forward_features(self.backbone.extract(ref, "ref"), self.backbone.extract(dist, "dist"))


def count_parameters(model, trainable_only=True):
    """Parameter count outside the backbone (trainable ones by default)."""
    return sum(p.numel() for n, p in model.named_parameters()
               if not n.startswith("backbone.") and (p.requires_grad or not trainable_only))


def parameter_breakdown(model):
    """Per-tensor counts for the head, keyed by parameter name."""
    return OrderedDict((n, p.numel()) for n, p in model.named_parameters()
                       if not n.startswith("backbone."))
