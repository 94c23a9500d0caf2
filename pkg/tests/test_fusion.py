import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from gaitfusion.errors import ConfigError
from gaitfusion.fusion import (MSSE, AttentionFusion, CatFusion, FusionVariant, MCFusion, PlusFusion,
                               build_fusion, concat_modalities, cross_level, inner_width, m_atf,
                               msse_scores, plus_fusion, weighted_fuse)
from gaitfusion.numerics import grad_check, module_tensors

D = torch.float64
SHAPE = (2, 4, 3, 6, 5)


def rand(*shape, seed=None):
    g = torch.Generator().manual_seed(seed) if seed is not None else None
    return torch.randn(*(shape or SHAPE), dtype=D, generator=g)


# -- variant -----------------------------------------------------------------------

def test_variant_default_stages():
    assert FusionVariant("mcf").active_stages(4) == (1, 2, 3, 4)
    for kind in ("plus", "cat", "attention"):
        assert FusionVariant(kind).active_stages(4) == (2,)
    assert FusionVariant("plus").active_stages(1) == (1,)
    assert FusionVariant("mcf", stages=(3, 2, 3)).active_stages(4) == (2, 3)


def test_variant_validation():
    with pytest.raises(ConfigError):
        FusionVariant("sum")
    with pytest.raises(ConfigError):
        FusionVariant(fsd_rule="max")
    with pytest.raises(ConfigError):
        FusionVariant(stages=(5,)).active_stages(4)


# -- concat ---------------------------------------------------------------------------

def test_concat_halves():
    fs, fd = rand(), rand()
    ft = concat_modalities(fs, fd)
    assert ft.shape[1] == 8
    assert torch.equal(ft[:, :4], fs) and torch.equal(ft[:, 4:], fd)
    fs2, fd2 = ft.split(4, dim=1)
    assert torch.equal(fs2, fs) and torch.equal(fd2, fd)


def test_concat_symmetric_when_equal():
    f = rand()
    ft = concat_modalities(f, f)
    assert torch.equal(torch.cat([ft[:, 4:], ft[:, :4]], 1), ft)


def test_concat_mismatch():
    with pytest.raises(ConfigError):
        concat_modalities(rand(), rand(2, 4, 3, 6, 4))


# -- msse ---------------------------------------------------------------------------------

def test_inner_width_rule():
    assert inner_width(8, 1) == 8
    assert inner_width(8, 4) == 2
    assert inner_width(4, 4) == 2
    assert inner_width(64, 4) == 16


def test_msse_zero_input_zero_bias():
    m = MSSE(4).double()
    for conv in m.modules():
        if hasattr(conv, "bias") and conv.bias is not None and conv.bias.dim() == 1 and not isinstance(conv, torch.nn.BatchNorm3d):
            torch.nn.init.zeros_(conv.bias)
    l_s, g_s = msse_scores(torch.zeros(1, 8, 2, 6, 5, dtype=D), m)
    assert l_s.shape == g_s.shape == (1, 8, 2, 6, 5)
    assert torch.count_nonzero(l_s) == 0 and torch.count_nonzero(g_s) == 0


def test_msse_branch_structure():
    m = MSSE(4, reduction=4)
    assert m.local.spatial.weight.shape[-1] == 3 and m.glob.spatial.weight.shape[-1] == 5
    assert m.local.reduce.weight.shape[:2] == (2, 8)
    assert m.local.expand.weight.shape[:2] == (8, 2)


def _randomize_bn(module):
    for bn in module.modules():
        if isinstance(bn, torch.nn.BatchNorm3d):
            bn.running_mean.uniform_(-0.5, 0.5)
            bn.running_var.uniform_(0.5, 2.0)


def test_msse_grad_check_sum_of_scores():
    # in train mode the sum of scores is flat in everything before the last BN
    # (normalized outputs sum to a constant), so running statistics are used here
    m = MSSE(2).double()
    _randomize_bn(m)
    m.eval()
    ft = rand(2, 4, 1, 5, 4, seed=1)
    rep = grad_check(lambda: sum(s.sum() for s in m(ft)), {"F_t": ft, **module_tensors(m)})
    assert rep.max_error < 1e-4, str(rep)


def test_msse_grad_check_train_mode():
    m = MSSE(2).double()
    ft = rand(2, 4, 1, 5, 4, seed=1)
    gl, gg = rand(2, 4, 1, 5, 4, seed=2), rand(2, 4, 1, 5, 4, seed=3)
    rep = grad_check(lambda: (m(ft)[0] * gl).sum() + (m(ft)[1] * gg).sum(),
                     {"F_t": ft, **module_tensors(m)})
    assert rep.max_error < 1e-4, str(rep)


# -- m_atf ---------------------------------------------------------------------------------

def test_matf_zero_scores_half():
    w = m_atf(torch.zeros(1, 8, 1, 2, 2, dtype=D), torch.zeros(1, 8, 1, 2, 2, dtype=D))
    assert w.shape == (1, 2, 4, 1, 2, 2)
    assert torch.all(w == 0.5)


def test_matf_closed_form():
    s = torch.cat([torch.full((1, 4, 1, 2, 2), 10.0, dtype=D), torch.full((1, 4, 1, 2, 2), -10.0, dtype=D)], 1)
    w = m_atf(s, torch.zeros_like(s))
    assert torch.allclose(w[:, 0], torch.full_like(w[:, 0], 1 / (1 + math.exp(-20))), atol=1e-15)
    assert torch.allclose(w[:, 1], torch.full_like(w[:, 1], 2.061153622438558e-09), rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-1e3, 1e3))
def test_matf_shift_invariant(seed, c):
    l, g = rand(1, 8, 2, 3, 3, seed=seed), rand(1, 8, 2, 3, 3, seed=seed + 1)
    assert torch.allclose(m_atf(l + c, g), m_atf(l, g), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e4))
def test_matf_weights_sum_to_one(seed, scale):
    w = m_atf(rand(2, 6, 2, 3, 3, seed=seed) * scale, rand(2, 6, 2, 3, 3, seed=seed + 7) * scale)
    assert ((w > 0) & (w < 1) | (w == 0) | (w == 1)).all()
    assert (w.sum(1) - 1).abs().max() <= 1e-6


def test_matf_odd_channels():
    with pytest.raises(ConfigError):
        m_atf(torch.zeros(1, 3, 1, 1, 1), torch.zeros(1, 3, 1, 1, 1))


# -- weighted fuse and cross level ------------------------------------------------------

def random_weights(seed=0, shape=SHAPE, scale=5.0):
    n, c = shape[:2]
    return m_atf(rand(n, 2 * c, *shape[2:], seed=seed) * scale, torch.zeros(n, 2 * c, *shape[2:], dtype=D))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_weighted_fuse_identical_inputs_bitwise(seed):
    f = rand(seed=seed) * 100
    assert torch.equal(weighted_fuse(f, f, random_weights(seed)), f)


def test_weighted_fuse_vertex():
    fs, fd = rand(), rand()
    w = torch.stack([torch.ones_like(fs), torch.zeros_like(fs)], 1)
    assert torch.equal(weighted_fuse(fs, fd, w), fs)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_weighted_fuse_bounds(seed):
    fs, fd = rand(seed=seed), rand(seed=seed + 1)
    x = weighted_fuse(fs, fd, random_weights(seed))
    eps = 1e-12
    assert (x >= torch.minimum(fs, fd) - eps).all() and (x <= torch.maximum(fs, fd) + eps).all()


def test_weighted_fuse_grad_check():
    fs, fd, g = rand(seed=3), rand(seed=4), rand(seed=6)
    w = random_weights(5, scale=1.0)
    ts = {"fs": fs, "fd": fd, "w": w}
    rep = grad_check(lambda: (weighted_fuse(fs, fd, w) * g).sum(), ts)
    assert rep.max_error < 1e-4, str(rep)


def test_weighted_fuse_grad_check_with_agreeing_entries():
    # weights come from the modality softmax, so check through the scores
    fs, fd, g = rand(seed=3), rand(seed=4), rand(seed=6)
    fd[0, 0] = fs[0, 0]
    scores = rand(2, 8, 3, 6, 5, seed=7)
    rep = grad_check(lambda: (weighted_fuse(fs, fd, m_atf(scores, torch.zeros_like(scores))) * g).sum(),
                     {"fs": fs, "fd": fd, "scores": scores})
    assert rep.max_error < 1e-4, str(rep)


def test_cross_level_rules():
    x, fs, fd = rand(), rand(), rand()
    assert torch.equal(cross_level(x, fs, fd, 1), x)
    assert torch.allclose(cross_level(x, fs, fd, 2), x + (fs + fd) / 2)
    assert torch.allclose(cross_level(x, fs, fd, 3, "sum"), x + fs + fd)
    for stage in (1, 2, 4):
        assert torch.equal(cross_level(x, fs, fd, stage, "zero"), x)


def test_mcf_identical_inputs_stage_two_doubles():
    m = MCFusion(4, FusionVariant()).double()
    f = rand()
    y, trace = m(f, f, 2)
    assert torch.equal(trace["X_f"], f)
    assert torch.equal(y, 2 * f)
    assert set(trace) == {"F_t", "L_S", "G_S", "W_S", "X_f", "Y_f"}


def test_mcf_per_pixel_granularity():
    m = MCFusion(4, FusionVariant(weight_granularity="per_pixel")).double()
    y, trace = m(rand(), rand(), 1)
    assert trace["W_S"].shape == (2, 2, 1, 3, 6, 5)
    assert y.shape == SHAPE


# -- baselines ----------------------------------------------------------------------------

def test_plus_identity_with_zero():
    f = rand()
    assert torch.equal(plus_fusion(f, torch.zeros_like(f)), f)
    assert torch.equal(PlusFusion()(f, torch.zeros_like(f), 2)[0], f)


def test_cat_with_summing_kernel_equals_plus():
    m = CatFusion(4).double()
    with torch.no_grad():
        eye = torch.eye(4, dtype=D)
        m.proj.weight.copy_(torch.cat([eye, eye], 1).reshape(4, 8, 1, 1, 1))
        m.proj.bias.zero_()
    fs, fd = rand(), rand()
    assert torch.allclose(m(fs, fd, 2)[0], plus_fusion(fs, fd), atol=1e-12)


def test_attention_zero_scores_is_average():
    m = AttentionFusion(4, FusionVariant("attention")).double()
    with torch.no_grad():
        m.local.expand.weight.zero_()
        m.local.expand.bias.zero_()
    fs, fd = rand(), rand()
    y, trace = m(fs, fd, 3)
    assert torch.allclose(y, 0.5 * fs + 0.5 * fd, atol=1e-12)
    assert "G_S" not in trace


def test_build_fusion_kinds():
    assert isinstance(build_fusion(4, FusionVariant("mcf")), MCFusion)
    assert isinstance(build_fusion(4, FusionVariant("plus")), PlusFusion)
    assert isinstance(build_fusion(4, FusionVariant("cat")), CatFusion)
    assert isinstance(build_fusion(4, FusionVariant("attention")), AttentionFusion)


@pytest.mark.parametrize("kind", ["cat", "attention"])
def test_baselines_grad_check(kind):
    m = build_fusion(2, FusionVariant(kind)).double()
    fs, fd = rand(2, 2, 1, 4, 3, seed=8), rand(2, 2, 1, 4, 3, seed=9)
    g = rand(2, 2, 1, 4, 3, seed=10)
    rep = grad_check(lambda: (m(fs, fd, 2)[0] * g).sum(), {"fs": fs, "fd": fd, **module_tensors(m)})
    assert rep.max_error < 1e-4, str(rep)
