"""Compatible feature modulation.

Historical data is unavailable, so features for the previous-phase model are
synthesised from the current features plus a perturbed class prototype taken
from the frozen previous classifier::

    prototype   = W_prev[y]
    perturbed   = trans(prototype) + lambda_g * sum_i alpha_i * z_i,   z_i ~ N(0, sigma_i^2)
    alpha       = softmax(mod(mean_tokens(F_cur)))
    F_hist      = F_cur + perturbed          (broadcast over tokens)
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ShapeError

SIGMA_MIN = 1e-4
SIGMA_MAX = 10.0


def initial_scales(k: int) -> np.ndarray:
    if k == 3:
        return np.array([0.1, 0.5, 1.0])
    return np.geomspace(0.1, 1.0, k)


class PerturbationBank(nn.Module):
    """Learnable pieces of the modulation: ``trans``, ``mod`` and per-component log std."""

    def __init__(self, width: int, num_components: int = 3, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or max(width // 2, 1)
        self.width = width
        self.trans = nn.Linear(width, width)
        self.mod = nn.Sequential(nn.Linear(width, hidden), nn.Tanh(), nn.Linear(hidden, num_components))
        scales = torch.as_tensor(np.log(initial_scales(num_components)), dtype=torch.float32)
        self.log_sigma = nn.Parameter(scales[:, None].repeat(1, width))
        with torch.no_grad():
            self.trans.weight.copy_(torch.eye(width))
            self.trans.bias.zero_()

    @property
    def num_components(self) -> int:
        return self.log_sigma.shape[0]

    def sigma(self) -> Tensor:
        return self.log_sigma.exp().clamp(SIGMA_MIN, SIGMA_MAX)

    def forward(
        self,
        features: Tensor,
        labels: Tensor,
        prev_classifier_weight: Tensor,
        lambda_g: float,
        generator: Optional[torch.Generator] = None,
    ) -> Tensor:
        """Batched modulation: ``[N, L, d]`` features and ``[N]`` labels -> ``[N, L, d]``."""
        prototypes = extract_prototype(prev_classifier_weight, labels)
        alpha = mixture_coefficients(self, features)
        perturbed = perturb_prototype(self, prototypes, alpha, lambda_g, generator)
        return modulate(perturbed, features)


def extract_prototype(classifier_weight: Tensor, label) -> Tensor:
    """Row(s) of the frozen classifier weight matrix; the bias is not used."""
    num_classes = classifier_weight.shape[0]
    idx = torch.as_tensor(label)
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= num_classes):
        raise IndexError(f"label out of range for {num_classes} classes: {label!r}")
    return classifier_weight[idx]


def mixture_coefficients(bank: PerturbationBank, features: Tensor) -> Tensor:
    """Softmax mixture weights from mean-pooled tokens; ``[L, d] -> [K]`` or ``[N, L, d] -> [N, K]``."""
    if features.shape[-1] != bank.width:
        raise ShapeError(f"feature width {features.shape[-1]} != {bank.width}")
    return bank.mod(features.mean(dim=-2)).softmax(dim=-1)


def perturb_prototype(
    bank: PerturbationBank,
    prototype: Tensor,
    alpha: Tensor,
    lambda_g: float,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """``trans(prototype) + lambda_g * sum_i alpha_i z_i`` with one draw per component per call.

    Accepts a single prototype ``[d]`` with ``alpha`` ``[K]`` or a batch ``[N, d]`` with ``[N, K]``.
    """
    base = bank.trans(prototype)
    if lambda_g == 0:
        return base
    sigma = bank.sigma()  # [K, d]
    shape = (*prototype.shape[:-1], *sigma.shape)
    eps = torch.randn(shape, generator=generator, dtype=sigma.dtype, device=sigma.device)
    noise = (alpha.unsqueeze(-1) * sigma * eps).sum(dim=-2)
    return base + lambda_g * noise


def modulate(perturbed_prototype: Tensor, features: Tensor) -> Tensor:
    """Add the (per-sample) perturbed prototype to every token of ``features``."""
    if perturbed_prototype.shape[-1] != features.shape[-1]:
        raise ShapeError(
            f"prototype width {perturbed_prototype.shape[-1]} != feature width {features.shape[-1]}"
        )
    return features + perturbed_prototype.unsqueeze(-2)
