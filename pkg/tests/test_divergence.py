import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from audio_kd.divergence import (FORWARD_KL, JSD, REVERSE_KL, Categorical, DivergenceKind, HiddenLossKind,
                                 InfiniteDivergence, divergence, divergence_grad, hidden_divergence,
                                 kd_hidden, kd_logits, skew_kl, softmax)
from helpers import central_difference, max_rel_error

KINDS = [FORWARD_KL, REVERSE_KL, JSD, skew_kl(0.1), skew_kl(0.5)]

logit_vectors = arrays(np.float64, st.integers(2, 12), elements=st.floats(-8, 8))


def pair(draw_len=6, seed=0):
    rng = np.random.default_rng(seed)
    return softmax(rng.normal(size=draw_len) * 2), softmax(rng.normal(size=draw_len) * 2)


def test_jsd_identity_zero():
    p, _ = pair()
    assert divergence(JSD, p, p) == 0.0


def test_jsd_disjoint_is_ln2():
    assert divergence(JSD, (1.0, 0.0), (0.0, 1.0)) == pytest.approx(math.log(2), abs=1e-12)


def test_forward_kl_oracle():
    # 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75), summed by hand
    assert divergence(FORWARD_KL, (0.5, 0.5), (0.25, 0.75)) == pytest.approx(0.14384103622589042, abs=1e-12)


def test_forward_kl_infinite_is_flagged():
    with pytest.raises(InfiniteDivergence) as err:
        divergence(FORWARD_KL, (0.5, 0.5), (1.0, 0.0))
    assert err.value.index == 1
    # zero mass in p where q is zero is fine
    assert divergence(FORWARD_KL, (1.0, 0.0), (1.0, 0.0)) == 0.0


def test_jsd_finite_with_zeros():
    assert math.isfinite(divergence(JSD, (0.5, 0.5, 0.0), (0.0, 0.0, 1.0)))


def test_length_mismatch():
    with pytest.raises(ValueError):
        divergence(JSD, (0.5, 0.5), (0.2, 0.3, 0.5))


def test_categorical_validation():
    with pytest.raises(ValueError):
        Categorical([0.5, 0.6])
    with pytest.raises(ValueError):
        Categorical([1.5, -0.5])
    with pytest.raises(ValueError):
        Categorical([float("nan"), 1.0])


@pytest.mark.parametrize("text,expected", [
    ("jsd", JSD), ("kl", FORWARD_KL), ("rkl", REVERSE_KL), ("skl:0.1", skew_kl(0.1)),
])
def test_kind_names(text, expected):
    assert DivergenceKind.parse(text) == expected
    assert DivergenceKind.parse(str(expected)) == expected


@pytest.mark.parametrize("bad", ["skl", "skl:0", "skl:1", "skl:1.5", "jsd:2", "tv"])
def test_bad_kind_names(bad):
    with pytest.raises(ValueError):
        DivergenceKind.parse(bad)


@settings(max_examples=200, deadline=None)
@given(a=logit_vectors, data=st.data())
def test_properties(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=st.floats(-8, 8)))
    p, q = softmax(a), softmax(b)
    assert abs(divergence(JSD, p, q) - divergence(JSD, q, p)) <= 1e-12
    assert 0.0 <= divergence(JSD, p, q) <= math.log(2) + 1e-15
    assert divergence(REVERSE_KL, p, q) == divergence(FORWARD_KL, q, p)
    for kind in KINDS:
        assert divergence(kind, p, q) >= 0.0
        assert divergence(kind, p, p) == 0.0


def test_skew_kl_limit_is_forward_kl():
    # KL(p || lam p + (1-lam) q) -> KL(p || q) as lam -> 0+
    p, q = (0.5, 0.3, 0.2), (0.2, 0.3, 0.5)
    target = divergence(FORWARD_KL, p, q)
    lams = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
    errors = [abs(divergence(skew_kl(lam), p, q) - target) for lam in lams]
    # error is O(lam): each tenfold cut in lam shrinks it at least fivefold
    assert all(e2 < e1 / 5 for e1, e2 in zip(errors, errors[1:]))
    assert errors[-1] < 1e-4


def test_hidden_divergence_examples():
    u = np.array([0.3, -1.0, 2.0])
    assert hidden_divergence("softmax_jsd", u, u) == 0.0
    assert hidden_divergence("mse", (1, 2, 3), (1, 2, 3)) == 0.0
    assert hidden_divergence("mse", (0, 0), (3, 4)) == 12.5
    with pytest.raises(ValueError):
        hidden_divergence("mse", (0, 0), (1, 2, 3))


def test_softmax_jsd_shift_invariant():
    # softmax ignores a constant shift, so the compared objects are identical
    u = np.array([0.3, -1.0, 2.0])
    assert hidden_divergence(HiddenLossKind.SOFTMAX_JSD, u, u + 5.0) == pytest.approx(0.0, abs=1e-15)


# --- gradients ------------------------------------------------------------


def test_jsd_grad_zero_at_identity():
    a = np.array([0.1, -0.4, 1.2, 0.0])
    gp, gq = divergence_grad(JSD, a, a)
    assert np.all(gp == 0.0) and np.all(gq == 0.0)


@pytest.mark.parametrize("kind", KINDS, ids=str)
def test_grad_matches_finite_differences(kind):
    rng = np.random.default_rng(17)
    for _ in range(5):
        a, b = rng.normal(size=7), rng.normal(size=7)
        gp, gq = divergence_grad(kind, a, b)
        np_ = central_difference(lambda x: divergence(kind, softmax(x), softmax(b)), a)
        nq = central_difference(lambda x: divergence(kind, softmax(a), softmax(x)), b)
        assert max_rel_error(gp, np_) < 1e-6
        assert max_rel_error(gq, nq) < 1e-6


def test_forward_kl_q_grad_at_example():
    a = np.log([0.5, 0.5])
    b = np.log([0.25, 0.75])
    _, gq = divergence_grad(FORWARD_KL, a, b)
    nq = central_difference(lambda x: divergence(FORWARD_KL, softmax(a), softmax(x)), b)
    assert max_rel_error(gq, nq) < 1e-6
    assert gq == pytest.approx([-0.25, 0.25], abs=1e-12)


@pytest.mark.parametrize("kind", KINDS, ids=str)
def test_torch_path_agrees_with_reference(kind):
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(4, 9)), rng.normal(size=(4, 9))
    got = kd_logits(kind, torch.from_numpy(a), torch.from_numpy(b)).numpy()
    want = [divergence(kind, softmax(x), softmax(y)) for x, y in zip(a, b)]
    assert got == pytest.approx(want, abs=1e-12)
    ta = torch.from_numpy(a).requires_grad_()
    tb = torch.from_numpy(b).requires_grad_()
    kd_logits(kind, ta, tb)[0].backward()
    gp, gq = divergence_grad(kind, a[0], b[0])
    assert max_rel_error(ta.grad[0].numpy(), gp) < 1e-10
    assert max_rel_error(tb.grad[0].numpy(), gq) < 1e-10


def test_torch_hidden_agrees():
    rng = np.random.default_rng(6)
    u, v = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    for kind in HiddenLossKind:
        got = kd_hidden(kind, torch.from_numpy(u), torch.from_numpy(v)).numpy()
        assert got == pytest.approx([hidden_divergence(kind, x, y) for x, y in zip(u, v)], abs=1e-12)
