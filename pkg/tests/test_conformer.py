import numpy as np
import pytest
import torch

from iqa_lab.backbone import FeatureStack, build_backbone, tiny_backbone_spec
from iqa_lab.conformer import (ConformerBlock, ConformerConfig, IQAConformer, count_parameters,
                               full_config, tiny_config)
from iqa_lab.errors import NonFiniteActivation, ShapeMismatch

TOY = ConformerConfig(num_blocks=1, dim=8, heads=2, ffn_dim=16, conv_kernel=3, grid=(3, 3),
                      dropout=0.0, mlp_head_dim=8)
TOY_CHANNELS = 6


def toy_model(cfg=TOY, seed=0):
    torch.manual_seed(seed)
    return IQAConformer(cfg, in_channels=TOY_CHANNELS).double()


def toy_stacks(batch=3, seed=1, grid=(3, 3)):
    g = torch.Generator().manual_seed(seed)
    ref = torch.randn(batch, TOY_CHANNELS, *grid, generator=g, dtype=torch.float64)
    dist = torch.randn(batch, TOY_CHANNELS, *grid, generator=g, dtype=torch.float64)
    return FeatureStack(ref, (2, 4), "ref"), FeatureStack(dist, (2, 4), "dist")


def rel_err(a, b, floor=1e-4):
    # floor keeps analytically-zero gradients from dividing noise by noise
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor)


def fd_check(model, loss_fn, params, eps=1e-6):
    """Max relative error between autograd and central differences per tensor."""
    model.zero_grad()
    loss_fn().backward()
    worst = {}
    for name, p in params:
        auto = p.grad.detach().numpy().copy()
        num = np.zeros_like(auto)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            with torch.no_grad():
                fp = loss_fn().item()
            flat[i] = old - eps
            with torch.no_grad():
                fm = loss_fn().item()
            flat[i] = old
            num.reshape(-1)[i] = (fp - fm) / (2 * eps)
        worst[name] = rel_err(auto, num)
    return worst


def test_block_preserves_shape():
    blk = ConformerBlock(tiny_config(dropout=0.1))
    x = torch.randn(4, 64, 16)
    assert blk(x, (8, 8)).shape == x.shape
    with pytest.raises(ShapeMismatch):
        blk(torch.randn(1, 60, 16), (8, 8))


def test_zero_residual_branches_reduce_to_layernorm():
    blk = ConformerBlock(TOY).double().eval()
    with torch.no_grad():
        for mod in (blk.ff1.fc2, blk.ff2.fc2, blk.self_attn.attn.out, blk.conv.pw2):
            mod.weight.zero_()
            mod.bias.zero_()
    x = torch.randn(2, 9, 8, dtype=torch.float64)
    torch.testing.assert_close(blk(x, (3, 3)), blk.norm(x), rtol=0, atol=1e-12)


def test_encode_is_single_block_for_L1():
    model = toy_model().eval()
    ref, dist = toy_stacks()
    enc, _ = model.embed(ref, dist)
    assert torch.equal(model.encode(enc), model.encoder[0](enc, TOY.grid))


def test_identical_pairs_give_identical_scores():
    bb = build_backbone(tiny_backbone_spec(64))
    torch.manual_seed(0)
    model = IQAConformer(tiny_config(), bb).eval()
    a = torch.rand(1, 3, 64, 64)
    b = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        sa = model(a, a)
        sb = model(b, b)
        enc_a, _ = model.embed(bb.extract(a, "ref"), bb.extract(a, "dist"))
        enc_b, _ = model.embed(bb.extract(b, "ref"), bb.extract(b, "dist"))
    # zero difference -> encoder memory depends only on position embeddings and biases
    assert torch.equal(model.encode(enc_a), model.encode(enc_b))
    assert sa.shape == (1,)
    assert torch.isfinite(sa).all() and torch.isfinite(sb).all()


def test_decode_scalar_and_batch_consistency():
    model = toy_model().eval()
    ref, dist = toy_stacks(batch=1)
    rep = lambda s: FeatureStack(s.grid.repeat(4, 1, 1, 1), s.tap_channels, s.source)
    with torch.no_grad():
        out = model.forward_features(rep(ref), rep(dist))
    assert out.shape == (4,)
    assert torch.all(out == out[0])


def test_eval_determinism():
    model = toy_model(TOY.__class__(**{**TOY.__dict__, "dropout": 0.2})).eval()
    ref, dist = toy_stacks()
    with torch.no_grad():
        assert torch.equal(model.forward_features(ref, dist), model.forward_features(ref, dist))


def test_permutation_sensitivity():
    model = toy_model().eval()
    ref, dist = toy_stacks(batch=1)
    perm = torch.randperm(9, generator=torch.Generator().manual_seed(3))

    def permute(s):
        g = s.grid.reshape(1, TOY_CHANNELS, 9)[..., perm].reshape(s.grid.shape)
        return FeatureStack(g, s.tap_channels, s.source)

    with torch.no_grad():
        a = model.forward_features(ref, dist)
        b = model.forward_features(permute(ref), permute(dist))
    assert not torch.allclose(a, b)


def test_no_nan_over_random_forwards():
    bb = build_backbone(tiny_backbone_spec(64))
    torch.manual_seed(0)
    model = IQAConformer(tiny_config(dropout=0.1), bb)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for i in range(100):
            model.train(i % 2 == 0)
            out = model(torch.rand(2, 3, 64, 64, generator=g), torch.rand(2, 3, 64, 64, generator=g))
            assert torch.isfinite(out).all()


def test_non_finite_activation_raises():
    model = toy_model().eval()
    ref, dist = toy_stacks()
    ref.grid[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteActivation):
        model.forward_features(ref, dist)


def test_gradients_match_finite_differences_every_group():
    model = toy_model()
    model.train()
    ref, dist = toy_stacks(batch=3)
    target = torch.tensor([0.5, -1.0, 0.25], dtype=torch.float64)
    loss_fn = lambda: ((model.forward_features(ref, dist) - target) ** 2).mean()
    worst = fd_check(model, loss_fn, list(model.named_parameters()))
    assert len(worst) == len(list(model.parameters()))
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    assert not bad, bad
    # softmax ignores a key bias and batch norm absorbs the depthwise bias
    for name, p in model.named_parameters():
        if name.endswith("attn.k.bias") or name.endswith("conv.dw.bias"):
            assert p.grad.abs().max() < 1e-12, name
        elif p.grad.abs().max() == 0:
            pytest.fail(f"{name} receives no gradient")


def _toy_count(c, d, ffn, k, grid, head, blocks=1):
    ln = 2 * d
    lin = lambda i, o: i * o + o
    ff = ln + lin(d, ffn) + lin(ffn, d)
    attn = 4 * lin(d, d)
    conv = ln + lin(d, 2 * d) + (d * k * k + d) + 2 * d + lin(d, d)
    enc = 2 * ff + (ln + attn) + conv + ln
    dec = 2 * ff + (ln + attn) + attn + conv + ln
    n = grid[0] * grid[1]
    return lin(c, d) + (1 + n) * d + d + blocks * (enc + dec) + lin(d, head) + lin(head, 1)


def test_count_tiny_config_by_hand():
    cfg = ConformerConfig(num_blocks=1, dim=8, heads=2, ffn_dim=16, conv_kernel=3, grid=(3, 3),
                          mlp_head_dim=8)
    model = IQAConformer(cfg, in_channels=TOY_CHANNELS)
    assert count_parameters(model) == _toy_count(TOY_CHANNELS, 8, 16, 3, (3, 3), 8)


def test_count_ffn_delta():
    cfg = ConformerConfig(num_blocks=2, dim=8, heads=2, ffn_dim=16, conv_kernel=3, grid=(3, 3))
    wide = ConformerConfig(**{**cfg.__dict__, "ffn_dim": 32})
    delta = count_parameters(IQAConformer(wide, in_channels=6)) - count_parameters(IQAConformer(cfg, in_channels=6))
    # each FFN gains d*F + F + F*d; two FFNs per block, encoder and decoder, L blocks
    per_ffn = 8 * 16 + 16 + 16 * 8
    assert delta == 2 * 2 * 2 * per_ffn


def test_full_config_count():
    model = IQAConformer(full_config(), in_channels=1920)
    assert count_parameters(model) == 1_159_169
    assert count_parameters(model) == _toy_count(1920, 128, 512, 7, (21, 21), 128)
    widened = IQAConformer(full_config(attn_head_dim=128), in_channels=1920)
    assert count_parameters(widened) > count_parameters(model)


def test_backbone_excluded_from_count():
    bb = build_backbone(tiny_backbone_spec(64))
    with_bb = IQAConformer(tiny_config(), bb)
    without = IQAConformer(tiny_config(), in_channels=96)
    assert count_parameters(with_bb) == count_parameters(without)
