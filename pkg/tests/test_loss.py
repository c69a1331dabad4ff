from types import SimpleNamespace

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from regdesk.loss import LossWeights, cosine_rows, loss_pred, loss_repa, loss_total

W = LossWeights()


def out(v_z, v_cls=None):
    return SimpleNamespace(v_z=v_z, v_cls=v_cls)


def test_defaults():
    assert W.beta == 0.03 and W.lam == 0.5


def test_loss_pred_examples():
    vz = torch.randn(2, 4, 4, 2, dtype=torch.float64)
    vc = torch.randn(2, 32, dtype=torch.float64)
    assert loss_pred(out(vz, vc), vz, vc, W).total.item() == 0.0
    c = 0.7
    assert loss_pred(out(vz + c, vc), vz, vc, W).total.item() == pytest.approx(c * c, rel=1e-12)
    assert loss_pred(out(vz, vc + c), vz, vc, W).total.item() == pytest.approx(0.03 * c * c, rel=1e-12)
    # no class-slot target: term omitted entirely
    assert loss_pred(out(vz, vc + c), vz, None, W).total.item() == 0.0


def test_loss_pred_shape_mismatch():
    with pytest.raises(ValueError):
        loss_pred(out(torch.zeros(2, 3)), torch.zeros(2, 4), None, W)


def test_loss_repa_examples():
    F0 = torch.randn(3, 17, 32, dtype=torch.float64)
    assert loss_repa(F0.clone(), F0)[0].item() == pytest.approx(-1.0, abs=1e-14)
    assert loss_repa(3.7 * F0, F0)[0].item() == pytest.approx(-1.0, abs=1e-14)
    # build a row-wise orthogonal partner by Gram-Schmidt
    P = torch.randn_like(F0)
    P = P - (P * F0).sum(-1, keepdim=True) / (F0 * F0).sum(-1, keepdim=True) * F0
    assert loss_repa(P, F0)[0].item() == pytest.approx(0.0, abs=1e-14)


def test_zero_norm_rows_are_counted():
    F0 = torch.ones(1, 4, 3)
    P = torch.ones(1, 4, 3)
    P[0, 1] = 0
    loss, zero = loss_repa(P, F0)
    assert zero == 1
    assert loss.item() == pytest.approx(-0.75)


def test_loss_total_examples():
    assert loss_total(0.8, -0.6, W) == pytest.approx(0.5)
    assert loss_total(0.8, -0.6, LossWeights(lam=0.0)) == 0.8
    assert loss_total(0.0, -1.0, W) == -0.5


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 9), d=st.integers(2, 12))
def test_repa_bounds_and_radial_gradient(seed, n, d):
    g = torch.Generator().manual_seed(seed)
    P = torch.randn(2, n, d, generator=g, dtype=torch.float64, requires_grad=True)
    F0 = torch.randn(2, n, d, generator=g, dtype=torch.float64)
    loss, _ = loss_repa(P, F0)
    assert -1.0 - 1e-12 <= loss.item() <= 1.0 + 1e-12
    (grad,) = torch.autograd.grad(loss, P)
    radial = (grad * P).sum(-1)
    assert radial.abs().max().item() < 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_repa_is_a_mean_over_tokens(seed):
    g = torch.Generator().manual_seed(seed)
    P = torch.randn(1, 5, 8, generator=g, dtype=torch.float64)
    F0 = torch.randn(1, 5, 8, generator=g, dtype=torch.float64)
    a = loss_repa(P, F0)[0].item()
    b = loss_repa(torch.cat([P, P], 1), torch.cat([F0, F0], 1))[0].item()
    assert a == pytest.approx(b, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), lam=st.floats(0.0, 2.0))
def test_total_lower_bound(seed, lam):
    g = torch.Generator().manual_seed(seed)
    vz = torch.randn(2, 3, generator=g, dtype=torch.float64)
    vt = torch.randn(2, 3, generator=g, dtype=torch.float64)
    w = LossWeights(lam=lam)
    pred = loss_pred(out(vz), vt, None, w).total
    repa, _ = loss_repa(torch.randn(2, 4, 5, generator=g, dtype=torch.float64), torch.randn(2, 4, 5, generator=g, dtype=torch.float64))
    assert pred.item() >= 0
    assert loss_total(pred, repa, w).item() >= -lam - 1e-12


def test_cosine_rows_shape_mismatch():
    with pytest.raises(ValueError):
        cosine_rows(torch.zeros(2, 3), torch.zeros(2, 4))
