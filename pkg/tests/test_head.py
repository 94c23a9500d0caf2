import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gaitfusion.errors import ConfigError
from gaitfusion.head import (BNNeck, Head, SeparateFC, ce_loss, combined_loss, horizontal_pool,
                             temporal_pool, triplet_loss)
from gaitfusion.numerics import grad_check

D = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, dtype=D, generator=torch.Generator().manual_seed(seed))


# -- pooling ---------------------------------------------------------------------------

def test_temporal_pool_single_frame_and_constant():
    x = rand(2, 3, 1, 4, 5)
    assert torch.equal(temporal_pool(x), x[:, :, 0])
    c = rand(2, 3, 1, 4, 5).expand(2, 3, 6, 4, 5)
    assert torch.equal(temporal_pool(c), c[:, :, 0])


def test_temporal_pool_brute_force():
    x = rand(2, 2, 5, 3, 3, seed=1)
    out = temporal_pool(x)
    for idx in np.ndindex(2, 2, 3, 3):
        n, c, h, w = idx
        assert out[idx].item() == max(x[n, c, t, h, w].item() for t in range(5))


def test_temporal_pool_modes():
    x = rand(1, 1, 4, 2, 2)
    assert torch.allclose(temporal_pool(x, "mean"), x.mean(2))
    with pytest.raises(ConfigError):
        temporal_pool(x, "median")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_temporal_pool_permutation_invariant(seed):
    x = rand(2, 3, 7, 4, 3, seed=seed)
    perm = torch.randperm(7, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(temporal_pool(x[:, :, perm]), temporal_pool(x))


def hp_reference(x, parts):
    n, c, h, w = x.shape
    band = math.ceil(h / parts)
    out = np.zeros((n, c, parts))
    for i in range(n):
        for ch in range(c):
            for p in range(parts):
                vals = [x[i, ch, r, col].item() for r in range(p * band, min((p + 1) * band, h))
                        for col in range(w)]
                out[i, ch, p] = max(vals) + sum(vals) / len(vals)
    return out


def test_hp_single_part():
    x = rand(2, 3, 8, 5)
    out = horizontal_pool(x, 1)
    assert torch.allclose(out[..., 0], x.amax((2, 3)) + x.mean((2, 3)))


def test_hp_rows_as_parts():
    x = rand(2, 3, 6, 1)
    assert torch.allclose(horizontal_pool(x, 6), 2 * x[..., 0])


def test_hp_sixteen_bands():
    x = rand(2, 2, 16, 3, seed=2)
    np.testing.assert_allclose(horizontal_pool(x, 16).numpy(), hp_reference(x, 16), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 20), parts=st.integers(1, 20), w=st.integers(1, 4))
def test_hp_matches_reference(seed, h, parts, w):
    band = math.ceil(h / parts) if parts <= h else 1
    x = rand(1, 2, h, w, seed=seed)
    if parts > h or band * parts - h >= band:
        with pytest.raises(ConfigError):
            horizontal_pool(x, parts)
        return
    np.testing.assert_allclose(horizontal_pool(x, parts).numpy(), hp_reference(x, parts), atol=1e-12)


def test_hp_too_many_parts():
    with pytest.raises(ConfigError):
        horizontal_pool(rand(1, 1, 4, 4), 5)


# -- separate fc and bnneck ----------------------------------------------------------------

def test_separate_fc_identity_and_zero():
    fc = SeparateFC(3, 4, 4).double()
    with torch.no_grad():
        fc.weight.copy_(torch.eye(4, dtype=D).expand(3, 4, 4))
    x = rand(2, 4, 3)
    assert torch.equal(fc(x), x)
    assert torch.count_nonzero(fc(torch.zeros(2, 4, 3, dtype=D))) == 0


def test_separate_fc_part_isolation():
    fc = SeparateFC(3, 4, 5).double()
    x = rand(2, 4, 3)
    base = fc(x).detach()
    with torch.no_grad():
        fc.weight[1] += 1e-3 * rand(4, 5)
    diff = (fc(x).detach() - base).abs().amax(dim=(0, 1))
    assert diff[1] > 0 and diff[0] == 0 and diff[2] == 0


def test_bnneck_eval_init_is_classifier():
    neck = BNNeck(3, 4, 5).double().eval()
    neck.bn.eps = 0.0
    f = rand(2, 4, 3)
    expect = torch.einsum("nep,pek->nkp", f, neck.classifier)
    assert torch.allclose(neck(f), expect, atol=1e-12)


def test_bnneck_identical_rows_and_reference():
    neck = BNNeck(2, 3, 4).double()
    with torch.no_grad():
        neck.classifier.copy_(rand(2, 3, 4, seed=5))
    f = rand(3, 3, 2)
    f[1] = f[0]
    p = neck(f)
    assert torch.equal(p[0], p[1])
    flat = f.reshape(3, 6)
    z = ((flat - flat.mean(0)) / torch.sqrt(flat.var(0, unbiased=False) + neck.bn.eps)).reshape(3, 3, 2)
    ref = np.zeros((3, 4, 2))
    for n in range(3):
        for k in range(4):
            for part in range(2):
                ref[n, k, part] = sum(z[n, e, part].item() * neck.classifier[part, e, k].item() for e in range(3))
    np.testing.assert_allclose(p.detach().numpy(), ref, atol=1e-9)


def test_bnneck_batch_of_one_in_train_mode():
    neck = BNNeck(2, 3, 4).double().train()
    f = rand(1, 3, 2)
    out = neck(f)
    neck.eval()
    assert torch.equal(out, neck(f))


# -- losses -------------------------------------------------------------------------------

def test_triplet_identical_embeddings_give_margin():
    f = torch.zeros(4, 3, 2, dtype=D)
    labels = torch.tensor([0, 0, 1, 1])
    assert triplet_loss(f, labels, 0.2).item() == pytest.approx(0.2, abs=1e-6)


def test_triplet_single_class_is_zero():
    assert triplet_loss(rand(4, 3, 2), torch.zeros(4, dtype=torch.long)).item() == 0.0


def test_triplet_1d_enumeration():
    f = torch.tensor([[0.0], [0.1], [1.0]], dtype=D).reshape(3, 1, 1)
    assert triplet_loss(f, torch.tensor([0, 0, 1]), 0.2).item() == 0.0


def triplet_reference(f, labels, m):
    n, e, parts = f.shape
    per_part = []
    for p in range(parts):
        d = lambda i, j: math.sqrt(sum((f[i, k, p] - f[j, k, p]).item() ** 2 for k in range(e)))
        losses = []
        for a in range(n):
            for pos in range(n):
                if pos == a or labels[pos] != labels[a]:
                    continue
                for neg in range(n):
                    if labels[neg] == labels[a]:
                        continue
                    v = max(0.0, d(a, pos) - d(a, neg) + m)
                    if v > 0:
                        losses.append(v)
        per_part.append(sum(losses) / len(losses) if losses else 0.0)
    return sum(per_part) / parts


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_triplet_matches_enumeration(seed):
    f = rand(6, 3, 2, seed=seed) * 0.3
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    assert triplet_loss(f, labels, 0.2).item() == pytest.approx(triplet_reference(f, labels, 0.2), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-100, 100))
def test_triplet_translation_invariant(seed, shift):
    f = rand(6, 4, 3, seed=seed)
    labels = torch.tensor([0, 1, 0, 1, 2, 2])
    c = rand(1, 4, 1, seed=seed + 1) * shift
    assert abs(triplet_loss(f + c, labels).item() - triplet_loss(f, labels).item()) < 1e-6


def test_ce_uniform_logits():
    logits = torch.zeros(5, 7, 3, dtype=D)
    assert ce_loss(logits, torch.arange(5)).item() == pytest.approx(math.log(7), abs=1e-12)


def test_ce_out_of_range():
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(2, 3, 1), torch.tensor([0, 3]))
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(2, 3, 1), torch.tensor([-1, 0]))


def test_combined_loss_weights():
    f, p = rand(4, 3, 2, seed=1), rand(4, 5, 2, seed=2)
    labels = torch.tensor([0, 0, 1, 1])
    total, l_tri, l_ce = combined_loss(f, p, labels, 0.0, 2.0)
    assert total.item() == pytest.approx(2.0 * ce_loss(p, labels).item())
    total, l_tri, l_ce = combined_loss(f, p, labels, 1.0, 1.0)
    assert total.item() == pytest.approx(triplet_reference(f, labels, 0.2) + ce_loss(p, labels).item(), abs=1e-9)
    with pytest.raises(ConfigError):
        combined_loss(f, p, labels, 0.0, 0.0)


def test_combined_loss_grad_check():
    f, p = rand(6, 3, 2, seed=3) * 0.2, rand(6, 4, 2, seed=4)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    rep = grad_check(lambda: combined_loss(f, p, labels)[0], {"f": f, "p": p})
    assert rep.max_error < 1e-4, str(rep)


def test_head_shapes():
    head = Head(8, 4, 6, 5)
    f, logits = head(torch.randn(3, 8, 2, 16, 11))
    assert f.shape == (3, 6, 4) and logits.shape == (3, 5, 4)
