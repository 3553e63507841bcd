"""Cumulative knowledge aggregation: gated low-rank adapter, token fusion, merge."""
from __future__ import annotations

import copy
import math

import torch
from torch import Tensor, nn

from .errors import ShapeError


class GatedAdapter(nn.Module):
    """``f -> f @ (omega * B @ A)`` computed as two rank-r products.

    ``B`` starts at zero so a fresh adapter is an exact no-op.
    """

    def __init__(self, width: int, rank: int, init_std: float = 0.02):
        super().__init__()
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.width = width
        self.A = nn.Parameter(init_std * torch.randn(rank, width))
        self.B = nn.Parameter(torch.zeros(width, rank))
        self.omega = nn.Parameter(torch.tensor(1.0))

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def effective_weight(self) -> Tensor:
        return self.omega * (self.B @ self.A)

    def forward(self, f: Tensor) -> Tensor:
        return adapter_apply(self, f)


def aggregate(module: nn.Linear, f: Tensor) -> Tensor:
    """Per-token affine map ``f @ W.T + b``."""
    if f.shape[-1] != module.in_features:
        raise ShapeError(f"feature width {f.shape[-1]} != aggregation width {module.in_features}")
    return module(f)


def adapter_apply(adapter: GatedAdapter, f_hist: Tensor) -> Tensor:
    if f_hist.shape[-1] != adapter.width:
        raise ShapeError(f"feature width {f_hist.shape[-1]} != adapter width {adapter.width}")
    return adapter.omega * ((f_hist @ adapter.B) @ adapter.A)


def cross_attention_fuse(f_tilde_hist: Tensor, f_hat_cur: Tensor) -> Tensor:
    """Projection-free attention: historical tokens query the current tokens.

    ``[..., L_h, d]`` queries over ``[..., L_c, d]`` keys/values -> ``[..., L_h, d]``.
    """
    d = f_hat_cur.shape[-1]
    if f_tilde_hist.shape[-1] != d:
        raise ShapeError(f"query width {f_tilde_hist.shape[-1]} != key width {d}")
    scores = f_tilde_hist @ f_hat_cur.transpose(-2, -1) / math.sqrt(d)
    return scores.softmax(dim=-1) @ f_hat_cur


def attention_weights(f_tilde_hist: Tensor, f_hat_cur: Tensor) -> Tensor:
    d = f_hat_cur.shape[-1]
    return (f_tilde_hist @ f_hat_cur.transpose(-2, -1) / math.sqrt(d)).softmax(dim=-1)


@torch.no_grad()
def merge_adapter(module: nn.Linear, adapter: GatedAdapter, mode: str = "residual") -> nn.Linear:
    """Fold ``adapter`` into a copy of ``module`` without changing its structure.

    ``residual``: merged(f) == module(f) + adapter(module(f)).
    ``multiplicative``: merged(f) == adapter(module(f)).
    """
    merged = copy.deepcopy(module)
    wa = adapter.effective_weight().to(module.weight.dtype)
    if mode == "residual":
        if not torch.any(wa):
            return merged
        merged.weight.add_(wa.T @ module.weight)
        if module.bias is not None:
            merged.bias.add_(module.bias @ wa)
    elif mode == "multiplicative":
        merged.weight.copy_(wa.T @ module.weight)
        if module.bias is not None:
            merged.bias.copy_(module.bias @ wa)
    else:
        raise ValueError(f"unknown merge mode {mode!r}")
    return merged
