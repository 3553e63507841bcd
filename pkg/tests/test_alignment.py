import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from modalinc.alignment import (ProxyScorer, combine_alignment, contrastive_align, direct_align,
                                distribution_align, hybrid_align)

from conftest import central_diff, rel_err

D64 = torch.float64


def test_direct_examples(rng):
    o = torch.randn(5, 3)
    assert direct_align(o, o).item() == 0.0
    assert direct_align(torch.tensor([[3.0, 4.0]]), torch.zeros(1, 2)).item() == pytest.approx(5.0)
    a, b = rng.standard_normal((8, 6)), rng.standard_normal((8, 6))
    expected = np.mean([math.sqrt(sum((a[i, k] - b[i, k]) ** 2 for k in range(6))) for i in range(8)])
    assert direct_align(torch.from_numpy(a), torch.from_numpy(b)).item() == pytest.approx(expected, abs=1e-6)


def test_contrastive_examples():
    assert contrastive_align(torch.randn(1, 4), torch.randn(1, 4), 0.3).item() == 0.0
    e = torch.eye(2)
    assert contrastive_align(e, e, 0.3).item() == pytest.approx(0.0)
    same = torch.ones(2, 3)
    assert contrastive_align(same, same, 0.3).item() == pytest.approx(0.3)


def test_contrastive_literal_abs_variant():
    e = torch.eye(2)
    # |0 - 1 + 0.3| = 0.7 for both ordered pairs
    assert contrastive_align(e, e, 0.3, form="abs").item() == pytest.approx(0.7)


def contrastive_oracle(a, b, margin):
    na = a / np.linalg.norm(a, axis=1, keepdims=True)
    nb = b / np.linalg.norm(b, axis=1, keepdims=True)
    terms = [max(0.0, na[k] @ nb[j] - na[k] @ nb[k] + margin)
             for k in range(len(a)) for j in range(len(a)) if k != j]
    return float(np.mean(terms))


def test_contrastive_matches_pair_loop(rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((7, 5))
    got = contrastive_align(torch.from_numpy(a), torch.from_numpy(b), 0.3).item()
    assert got == pytest.approx(contrastive_oracle(a, b, 0.3), abs=1e-9)


def test_contrastive_zero_norm_guard():
    out = contrastive_align(torch.zeros(3, 4), torch.randn(3, 4), 0.3)
    assert torch.isfinite(out)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_contrastive_row_scale_invariance(c, rng):
    a, b = torch.from_numpy(rng.standard_normal((5, 4))), torch.from_numpy(rng.standard_normal((5, 4)))
    scaled = a.clone()
    scaled[2] *= c
    assert contrastive_align(scaled, b).item() == pytest.approx(contrastive_align(a, b).item(), abs=1e-6)
    scaled_b = b.clone()
    scaled_b[0] *= c
    assert contrastive_align(a, scaled_b).item() == pytest.approx(contrastive_align(a, b).item(), abs=1e-6)


def test_distribution_examples():
    o = torch.randn(4, 3)
    assert distribution_align(o, o, ProxyScorer(3)).item() == 0.0
    a, b = torch.randn(1, 3), torch.randn(1, 3)
    assert distribution_align(a, b, ProxyScorer(3)).item() == pytest.approx((a - b).norm().item(), rel=1e-6)
    scorer = ProxyScorer(2)
    with torch.no_grad():
        scorer.score.weight.zero_()
        scorer.score.bias.zero_()
    a = torch.tensor([[1.0, 2.0], [3.0, -1.0]], dtype=D64)
    b = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=D64)
    # weighted means: cur (2.0, 0.5), hist (0.5, 0.5)
    assert distribution_align(a, b, scorer.double()).item() == pytest.approx(1.5, abs=1e-6)


def test_beta_on_simplex():
    beta = ProxyScorer(6)(torch.randn(9, 6))
    assert beta.shape == (9,)
    assert torch.all(beta >= 0) and beta.sum().item() == pytest.approx(1.0, abs=1e-6)


def test_hybrid_examples():
    o = torch.eye(3)
    assert hybrid_align(o, o, ProxyScorer(3)).item() == pytest.approx(0.0)
    assert combine_alignment(1.0, 0.5, 0.25, 0.8, 0.6) == pytest.approx(1.55)
    a, b = torch.randn(4, 5), torch.randn(4, 5)
    assert torch.equal(hybrid_align(a, b, ProxyScorer(5), 0.0, 0.0), direct_align(a, b))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0.0, 2.0))
def test_losses_non_negative(n, d, seed, margin):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(n, d, generator=g), torch.randn(n, d, generator=g)
    scorer = ProxyScorer(d)
    for loss in (direct_align(a, b), contrastive_align(a, b, margin), distribution_align(a, b, scorer),
                 hybrid_align(a, b, scorer, 0.8, 0.6, margin)):
        assert loss.item() >= 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_zero_at_identity_orthonormal(n, seed):
    q, _ = torch.linalg.qr(torch.randn(8, 8, generator=torch.Generator().manual_seed(seed), dtype=D64))
    o = q[:n]
    assert contrastive_align(o, o, 0.3).item() == pytest.approx(0.0, abs=1e-12)
    assert hybrid_align(o, o, ProxyScorer(8).double(), 0.8, 0.6, 0.3).item() == pytest.approx(0.0, abs=1e-12)


def _off_kink_batch():
    g = torch.Generator().manual_seed(0)
    while True:
        a = torch.randn(4, 8, generator=g, dtype=D64)
        b = torch.randn(4, 8, generator=g, dtype=D64)
        na, nb = a / a.norm(dim=1, keepdim=True), b / b.norm(dim=1, keepdim=True)
        sim = na @ nb.T
        terms = (sim - sim.diagonal()[:, None] + 0.3)[~torch.eye(4, dtype=torch.bool)]
        if terms.abs().min() >= 1e-3:
            return a, b


@pytest.mark.parametrize("name", ["direct", "contrastive", "distribution", "hybrid"])
def test_loss_gradients_match_finite_differences(name):
    a, b = _off_kink_batch()
    torch.manual_seed(0)
    scorer = ProxyScorer(8).double()
    fn = {"direct": lambda: direct_align(a, b),
          "contrastive": lambda: contrastive_align(a, b, 0.3),
          "distribution": lambda: distribution_align(a, b, scorer),
          "hybrid": lambda: hybrid_align(a, b, scorer, 0.8, 0.6, 0.3)}[name]
    for t in (a, b):
        t.requires_grad_(True)
        t.grad = None
    fn().backward()
    for t in (a, b):
        with torch.no_grad():
            numeric = central_diff(fn, t)
        assert rel_err(t.grad, numeric) <= 1e-4
    for p in scorer.parameters():
        if p.grad is not None:
            with torch.no_grad():
                assert rel_err(p.grad, central_diff(fn, p)) <= 1e-4
