"""Parameter-count report for the conformer head and the truncated trunk."""
import dataclasses
from collections import OrderedDict

from .backbone import InceptionResNetV2Trunk, inception_backbone_spec
from .conformer import IQAConformer, count_parameters, full_config

REFERENCE_TOTAL = 2_831_841
INCEPTION_IN_CHANNELS = 1920  # mixed5b (320) + 5 block35 taps (320 each)


def _group(name):
    # drop the tensor name, keep the owning layer path
    return name.rsplit(".", 1)[0] if "." in name else name


def layer_counts(model):
    out = OrderedDict()
    for n, p in model.named_parameters():
        if n.startswith("backbone.") or not p.requires_grad:
            continue
        g = _group(n)
        out[g] = out.get(g, 0) + p.numel()
    return out


def trunk_parameter_count(spec=None):
    trunk = InceptionResNetV2Trunk(spec or inception_backbone_spec())
    return sum(p.numel() for p in trunk.parameters())


def parameter_count_report(cfg=None, in_channels=INCEPTION_IN_CHANNELS, reference=REFERENCE_TOTAL,
                           alternatives=True):
    """Head count per layer, trunk count, and the delta against ``reference``.

    With ``alternatives`` the report also counts the widened-attention
    reading (128 per head) and itemizes where its layers differ.
    """
    cfg = cfg or full_config()
    head = IQAConformer(cfg, in_channels=in_channels)
    layers = layer_counts(head)
    head_total = count_parameters(head)
    trunk = trunk_parameter_count()
    report = {
        "config": {"num_blocks": cfg.num_blocks, "dim": cfg.dim, "heads": cfg.heads, "ffn_dim": cfg.ffn_dim,
                   "grid": list(cfg.grid), "attn_head_dim": cfg.head_dim, "mlp_head_dim": cfg.mlp_head_dim},
        "in_channels": in_channels,
        "head_trainable": head_total,
        "trunk": trunk,
        "total": head_total + trunk,
        "reference": reference,
        "delta": head_total + trunk - reference,
        "layers": dict(layers),
    }
    if alternatives:
        alts = {}
        for label, over in (("attention_head_width_128", {"attn_head_dim": 128}),
                            ("layernorm_linear_head", {"mlp_head_dim": None})):
            alt = IQAConformer(dataclasses.replace(cfg, **over), in_channels=in_channels)
            alt_layers = layer_counts(alt)
            diffs = {k: alt_layers.get(k, 0) - layers.get(k, 0) for k in set(alt_layers) | set(layers)
                     if alt_layers.get(k, 0) != layers.get(k, 0)}
            total = count_parameters(alt) + trunk
            alts[label] = {"head_trainable": count_parameters(alt), "total": total,
                           "delta": total - reference, "layer_deltas": dict(sorted(diffs.items()))}
        report["alternatives"] = alts
    return report


def format_report(report):
    lines = [f"{'layer':<48} {'params':>10}"]
    lines += [f"{k:<48} {v:>10,}" for k, v in report["layers"].items()]
    lines.append(f"{'head (trainable)':<48} {report['head_trainable']:>10,}")
    lines.append(f"{'trunk through block35_10':<48} {report['trunk']:>10,}")
    lines.append(f"{'total':<48} {report['total']:>10,}")
    lines.append(f"{'reference':<48} {report['reference']:>10,}")
    lines.append(f"{'delta':<48} {report['delta']:>+10,}")
    for label, alt in report.get("alternatives", {}).items():
        lines.append(f"alternative {label}: total {alt['total']:,} (delta {alt['delta']:+,})")
        lines += [f"  {k:<46} {v:>+10,}" for k, v in alt["layer_deltas"].items()]
    return "\n".join(lines)
