"""Unified classifier: input projection, aggregation module, transformer backbone, head.

The same network serves every modality. Inference is
``raw features -> aggregation -> backbone -> mean pool -> classifier`` and never
needs to be told which modality it is looking at.
"""
from __future__ import annotations

import hashlib
import math
from typing import Iterable, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig
from .errors import ShapeError


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: Tensor) -> Tensor:
        n, length, width = x.shape
        head_dim = width // self.heads
        q, k, v = self.qkv(x).split(width, dim=-1)
        # [n, heads, L, head_dim]
        q, k, v = (t.reshape(n, length, self.heads, head_dim).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(n, length, width))


class EncoderLayer(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = nn.Linear(mlp_ratio * width, width)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class Backbone(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.pos_embed: Optional[nn.Parameter] = None
        if config.positional:
            self.pos_embed = nn.Parameter(0.02 * torch.randn(config.max_len, config.width))
        self.layers = nn.ModuleList(
            EncoderLayer(config.width, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.width)

    def forward(self, h: Tensor) -> Tensor:
        """[N, L, d] tokens -> [N, d] mean-pooled classification feature."""
        if self.pos_embed is not None:
            if h.shape[1] > self.pos_embed.shape[0]:
                raise ShapeError(f"sequence length {h.shape[1]} exceeds max_len {self.pos_embed.shape[0]}")
            h = h + self.pos_embed[: h.shape[1]]
        for layer in self.layers:
            h = layer(h)
        return self.norm(h).mean(dim=1)


class MILModel(nn.Module):
    """Transformer classifier shared across all phases.

    ``aggregation`` is the per-model linear front-end (the site where adapters are
    merged), ``backbone`` the transformer encoder and ``classifier`` the single
    head carried from phase to phase over the shared label space.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.width = config.width
        self.projections = nn.ModuleDict()
        self.aggregation = nn.Linear(config.width, config.width)
        self.backbone = Backbone(config)
        self.classifier = nn.Linear(config.width, config.num_classes)

    def add_input_dim(self, raw_dim: int) -> None:
        """Register a projection for features of width ``raw_dim`` (no-op at model width)."""
        if raw_dim != self.width and str(raw_dim) not in self.projections:
            ref = self.aggregation.weight
            self.projections[str(raw_dim)] = nn.Linear(raw_dim, self.width).to(ref.dtype)

    def project(self, x: Tensor) -> Tensor:
        raw_dim = x.shape[-1]
        if raw_dim == self.width:
            return x
        if str(raw_dim) not in self.projections:
            raise ShapeError(f"feature width {raw_dim} does not match model width {self.width}")
        return self.projections[str(raw_dim)](x)

    def aggregate(self, f: Tensor) -> Tensor:
        return self.aggregation(f)

    def encode(self, h: Tensor) -> Tensor:
        return self.backbone(h)

    def forward(self, x: Tensor, adapter: Optional[nn.Module] = None) -> tuple[Tensor, Tensor]:
        """Return ``(pooled_feature, logits)`` for a batch ``[N, L, raw_dim]`` (or one ``[L, raw_dim]``).

        With ``adapter`` the aggregation output takes the residual adapter branch
        ``h + adapter(h)``, which is what :func:`merge_adapter` folds in.
        """
        single = x.dim() == 2
        if single:
            x = x.unsqueeze(0)
        if x.dim() != 3:
            raise ShapeError(f"expected [N, L, d] features, got shape {tuple(x.shape)}")
        h = self.aggregate(self.project(x))
        if adapter is not None:
            h = h + adapter(h)
        pooled = self.encode(h)
        logits = self.classifier(pooled)
        if single:
            return pooled[0], logits[0]
        return pooled, logits

    def predict(self, x: Tensor) -> Tensor:
        return self(x)[1].argmax(dim=-1)


def init_model(config: ModelConfig, input_dims: Iterable[int] = ()) -> MILModel:
    """Build a model whose parameters depend only on ``config`` (incl. its seed)."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = MILModel(config)
        for raw_dim in sorted(set(input_dims)):
            model.add_input_dim(raw_dim)
    return model


def param_checksum(module: nn.Module) -> str:
    """Hex digest over every parameter and buffer, in name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
