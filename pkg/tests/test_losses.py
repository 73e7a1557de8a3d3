import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_gradient_check
from salientforget.errors import ConfigError, InputError, NumericError, UsageError
from salientforget.losses import contrastive_forget_loss, kl_uniform_loss, retain_ce_loss
from salientforget.model import forward_features

# hand-evaluated: 0.75 ln 1.5 + 0.25 ln 0.5
KL_LN3_0 = 0.13081203594113697
# -ln(e^{1/1.4} / (e^{1/1.4} + 1))
CONTRASTIVE_TAU14 = 0.3984684615997865
# -ln 0.75
CE_LN3_0 = 0.2876820724517809


def test_kl_zero_for_uniform_logits():
    assert kl_uniform_loss(torch.full((3, 10), 2.5)).item() == pytest.approx(0.0, abs=1e-7)


def test_kl_worked_example():
    assert kl_uniform_loss(torch.tensor([[math.log(3.0), 0.0]])).item() == pytest.approx(KL_LN3_0, abs=1e-6)


def test_kl_saturates_at_ln_k():
    assert kl_uniform_loss(torch.tensor([[30.0, -30.0]])).item() == pytest.approx(math.log(2), abs=1e-4)


def test_kl_equals_ln_k_minus_entropy():
    gen = torch.Generator().manual_seed(0)
    for _ in range(100):
        logits = torch.randn(8, 7, generator=gen, dtype=torch.float64) * 3
        p = torch.softmax(logits, 1)
        entropy = -(p * p.log()).sum(1).mean()
        assert kl_uniform_loss(logits).item() == pytest.approx(math.log(7) - entropy.item(), abs=1e-6)


def test_kl_rejects_non_finite():
    with pytest.raises(NumericError):
        kl_uniform_loss(torch.tensor([[float("nan"), 0.0]]))
    with pytest.raises(InputError):
        kl_uniform_loss(torch.zeros(3, 1))


def _unit(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    return v / v.norm()


def test_contrastive_worked_example():
    z = _unit([1.0, 0.0])
    loss = contrastive_forget_loss(z, z.clone(), _unit([0.0, 1.0]), tau=1.4)
    assert loss.item() == pytest.approx(CONTRASTIVE_TAU14, abs=1e-6)


@pytest.mark.parametrize("n_neg", [1, 4, 9])
def test_contrastive_symmetric_case(n_neg):
    z = _unit([1.0, 0.0, 0.0])
    negatives = z.repeat(n_neg, 1)
    loss = contrastive_forget_loss(z, z.clone(), negatives, tau=1.4)
    assert loss.item() == pytest.approx(math.log(n_neg + 1), abs=1e-9)


def test_contrastive_increases_with_negative_similarity():
    z = _unit([1.0, 0.0])
    angles = np.linspace(np.pi, 0.0, 9)
    losses = [contrastive_forget_loss(z, _unit([1.0, 0.2]), _unit([np.cos(a), np.sin(a)])).item() for a in angles]
    assert all(b > a for a, b in zip(losses, losses[1:]))


def test_contrastive_decreases_with_positive_similarity():
    z = _unit([1.0, 0.0])
    neg = _unit([0.3, 1.0])
    angles = np.linspace(np.pi, 0.0, 9)
    losses = [contrastive_forget_loss(z, _unit([np.cos(a), np.sin(a)]), neg).item() for a in angles]
    assert all(b < a for a, b in zip(losses, losses[1:]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
def test_contrastive_permutation_invariant_and_positive(seed, n):
    gen = torch.Generator().manual_seed(seed)
    z, zp = torch.randn(3, 5, generator=gen, dtype=torch.float64), torch.randn(3, 5, generator=gen, dtype=torch.float64)
    zr = torch.randn(n, 5, generator=gen, dtype=torch.float64)
    perm = torch.randperm(n, generator=gen)
    a = contrastive_forget_loss(z, zp, zr)
    b = contrastive_forget_loss(z, zp, zr[perm])
    assert a.item() == pytest.approx(b.item(), abs=1e-12)
    assert a.item() > 0


def test_contrastive_embedding_gradient_matches_fd():
    gen = torch.Generator().manual_seed(1)
    z = torch.randn(4, 6, generator=gen, dtype=torch.float64, requires_grad=True)
    zp = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    zr = torch.randn(5, 6, generator=gen, dtype=torch.float64)
    (grad,) = torch.autograd.grad(contrastive_forget_loss(z, zp, zr), z)
    h = 1e-4
    for i in range(4):
        for j in range(6):
            e = torch.zeros_like(z)
            e[i, j] = h
            with torch.no_grad():
                fd = (contrastive_forget_loss(z + e, zp, zr) - contrastive_forget_loss(z - e, zp, zr)).item() / (2 * h)
            assert abs(grad[i, j].item() - fd) <= 1e-3 * max(abs(fd), 1e-8)


def test_contrastive_errors():
    z = _unit([1.0, 0.0])
    with pytest.raises(UsageError):
        contrastive_forget_loss(z, z, torch.zeros(0, 2, dtype=torch.float64))
    with pytest.raises(ConfigError):
        contrastive_forget_loss(z, z, z, tau=0.0)


def test_ce_examples():
    assert retain_ce_loss(torch.zeros(2, 10), torch.tensor([3, 7])).item() == pytest.approx(math.log(10), abs=1e-6)
    logits = torch.full((1, 10), -30.0)
    logits[0, 4] = 30.0
    assert retain_ce_loss(logits, torch.tensor([4])).item() == pytest.approx(0.0, abs=1e-6)
    assert retain_ce_loss(torch.tensor([[math.log(3.0), 0.0]]), torch.tensor([0])).item() == pytest.approx(CE_LN3_0, abs=1e-6)


def test_ce_label_out_of_range():
    with pytest.raises(InputError):
        retain_ce_loss(torch.zeros(1, 3), torch.tensor([3]))


def test_model_grads_of_contrastive_and_ce(tiny_model):
    torch.manual_seed(2)
    x, xp, xr = torch.randn(4, 3, 32, 32), torch.randn(4, 3, 32, 32), torch.randn(5, 3, 32, 32)
    y = torch.tensor([0, 3, 5, 9, 1])
    tiny_model.eval()

    def con(m):
        dt = next(m.parameters()).dtype
        return contrastive_forget_loss(forward_features(m, x.to(dt)), forward_features(m, xp.to(dt)),
                                       forward_features(m, xr.to(dt)), tau=1.4)

    def ce(m):
        return retain_ce_loss(m(xr.to(next(m.parameters()).dtype)), y)

    for fn in (con, ce):
        errors = fd_gradient_check(tiny_model, fn)
        assert len(errors) >= 20 and max(errors) < 1e-3
