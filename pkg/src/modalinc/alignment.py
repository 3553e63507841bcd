"""Hybrid alignment between current-branch and historical-branch pooled features.

All losses take ``o_cur`` and ``o_hist`` of shape ``[N, d]`` paired by row.
"""
from __future__ import annotations

import torch
from torch import Tensor, nn

NORM_EPS = 1e-12


class ProxyScorer(nn.Module):
    """Per-sample scores whose batch softmax gives the proxy weights ``beta``."""

    def __init__(self, width: int):
        super().__init__()
        self.score = nn.Linear(width, 1)

    def forward(self, o: Tensor) -> Tensor:
        return self.score(o).squeeze(-1).softmax(dim=0)


def _check(o_cur: Tensor, o_hist: Tensor) -> None:
    if o_cur.shape != o_hist.shape or o_cur.dim() != 2:
        raise ValueError(f"expected paired [N, d] features, got {tuple(o_cur.shape)} and {tuple(o_hist.shape)}")


def direct_align(o_cur: Tensor, o_hist: Tensor) -> Tensor:
    """Mean over samples of ``||o_cur_i - o_hist_i||_2``."""
    _check(o_cur, o_hist)
    return (o_cur - o_hist).norm(dim=-1).mean()


def contrastive_align(o_cur: Tensor, o_hist: Tensor, margin: float = 0.3, form: str = "hinge") -> Tensor:
    """Margin loss over ordered pairs k != j on L2-normalised features.

    term(k, j) = sim(cur_k, hist_j) - sim(cur_k, hist_k) + margin, passed through
    ``max(0, .)`` (``form="hinge"``) or ``|.|`` (``form="abs"``); averaged over pairs.
    """
    _check(o_cur, o_hist)
    n = o_cur.shape[0]
    if n < 2:
        return o_cur.sum() * 0.0
    cur = o_cur / (o_cur.norm(dim=-1, keepdim=True) + NORM_EPS)
    hist = o_hist / (o_hist.norm(dim=-1, keepdim=True) + NORM_EPS)
    sim = cur @ hist.T
    terms = sim - sim.diagonal().unsqueeze(1) + margin
    if form == "hinge":
        terms = terms.clamp(min=0)
    elif form == "abs":
        terms = terms.abs()
    else:
        raise ValueError(f"unknown contrastive form {form!r}")
    off_diag = ~torch.eye(n, dtype=torch.bool, device=o_cur.device)
    return terms[off_diag].mean()


def distribution_align(o_cur: Tensor, o_hist: Tensor, scorer: ProxyScorer | Tensor) -> Tensor:
    """``||sum_k beta_k cur_k - sum_k beta_k hist_k||_2`` with one shared ``beta``.

    ``scorer`` is either a :class:`ProxyScorer` (``beta`` scored from ``o_cur``) or a
    precomputed weight vector.
    """
    _check(o_cur, o_hist)
    beta = scorer(o_cur) if isinstance(scorer, nn.Module) else scorer
    return (beta @ o_cur - beta @ o_hist).norm()


def hybrid_align(
    o_cur: Tensor,
    o_hist: Tensor,
    scorer: ProxyScorer | Tensor,
    lambda_con: float = 0.8,
    lambda_dis: float = 0.6,
    margin: float = 0.3,
    form: str = "hinge",
) -> Tensor:
    return combine_alignment(
        direct_align(o_cur, o_hist),
        contrastive_align(o_cur, o_hist, margin, form) if lambda_con else 0.0,
        distribution_align(o_cur, o_hist, scorer) if lambda_dis else 0.0,
        lambda_con,
        lambda_dis,
    )


def combine_alignment(direct, contrastive, distribution, lambda_con: float, lambda_dis: float):
    return direct + lambda_con * contrastive + lambda_dis * distribution
