"""Phase-sequential training.

Phase 1 is plain supervised training. From phase 2 on, each mini-batch runs two
branches: the current model on current features, and the frozen previous-phase
snapshot on modulated features. Their pooled features are tied together by the
hybrid alignment loss, and the phase ends by folding the gated adapter into the
aggregation module.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .alignment import ProxyScorer, contrastive_align, direct_align, distribution_align
from .bridging import GatedAdapter, adapter_apply, cross_attention_fuse, merge_adapter
from .config import ModelConfig
from .data import PhaseDataset
from .errors import ConfigError, NumericalError
from .evaluation import eval_accuracy
from .model import MILModel, init_model, param_checksum
from .modulation import PerturbationBank

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhaseSnapshot:
    """Frozen end-of-phase copy of the model, used as the historical model."""

    model: MILModel
    phase: int

    def checksum(self) -> str:
        return param_checksum(self.model)

    def __call__(self, x: Tensor):
        return self.model(x)


def snapshot_model(model: MILModel, phase: int) -> PhaseSnapshot:
    frozen = copy.deepcopy(model)
    frozen.requires_grad_(False)
    frozen.eval()
    return PhaseSnapshot(model=frozen, phase=phase)


class HarmonyHeads(nn.Module):
    """Per-phase trainable extras: modulation bank, gated adapter, proxy scorer."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.bank = PerturbationBank(config.width, config.num_perturbations)
        self.adapter = GatedAdapter(config.width, config.adapter_rank)
        self.scorer = ProxyScorer(config.width)


def init_heads(config: ModelConfig, phase: int, dtype: torch.dtype = torch.float32) -> HarmonyHeads:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_derive_seed(config.seed, phase, 1))
        return HarmonyHeads(config).to(dtype)


def _derive_seed(seed: int, phase: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, phase, stream]).generate_state(1)[0])


def total_loss(logits: Tensor, labels: Tensor, align_loss, lam: float) -> Tensor:
    """Mean cross-entropy plus ``lam`` times the alignment loss."""
    return F.cross_entropy(logits, labels) + lam * align_loss


@dataclass
class StepOutput:
    loss: Tensor
    cls: Tensor
    align: Tensor
    logits: Tensor
    parts: dict[str, Tensor] = field(default_factory=dict)


def harmony_step(
    model: MILModel,
    snapshot: PhaseSnapshot,
    heads: HarmonyHeads,
    x: Tensor,
    y: Tensor,
    config: ModelConfig,
    generator: Optional[torch.Generator] = None,
) -> StepOutput:
    """Forward both branches for one batch and return the overall objective."""
    hist = snapshot.model
    f_cur = model.project(x)
    f_hist = heads.bank(f_cur, y, hist.classifier.weight, config.lambda_g, generator)
    h_cur = model.aggregate(f_cur)
    # residual adapter branch on the current side: exactly what merge_adapter folds in
    h_cur = h_cur + adapter_apply(heads.adapter, h_cur)
    h_hist = hist.aggregate(f_hist)
    fused = cross_attention_fuse(adapter_apply(heads.adapter, h_hist), h_cur)
    o_cur = model.encode(fused)
    o_hist = hist.encode(h_hist)
    logits = model.classifier(o_cur)

    beta = heads.scorer(o_cur)
    parts = {"direct": direct_align(o_cur, o_hist)}
    parts["contrastive"] = contrastive_align(o_cur, o_hist, config.margin, config.contrastive_form)
    parts["distribution"] = distribution_align(o_cur, o_hist, beta)
    align = parts["direct"] + config.lambda_con * parts["contrastive"] + config.lambda_dis * parts["distribution"]
    cls = F.cross_entropy(logits, y)
    loss = cls + config.lambda_align * align
    _check_finite({"features": f_cur, "modulated features": f_hist, "fused features": fused,
                   "current pooled features": o_cur, "historical pooled features": o_hist,
                   "logits": logits, "alignment loss": align, "loss": loss})
    parts["beta"] = beta
    return StepOutput(loss=loss, cls=cls, align=align, logits=logits, parts=parts)


def _check_finite(tensors: dict[str, Tensor]) -> None:
    for role, t in tensors.items():
        if not torch.isfinite(t).all():
            raise NumericalError(f"non-finite values in {role}")


@dataclass
class EpochRecord:
    epoch: int
    cls: float
    align: float
    total: float
    val_acc: float


@dataclass
class TrainReport:
    method: str
    phase: int
    modality: str
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    checksum: str = ""

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def content(self) -> dict[str, Any]:
        data = self.to_dict()
        data.pop("wall_clock")
        return data

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainReport":
        data = dict(data)
        data["epochs"] = [EpochRecord(**e) for e in data["epochs"]]
        return cls(**data)


Regularizer = Callable[[MILModel, Tensor, Tensor, Tensor], Tensor]


def train_phase(
    model: MILModel,
    snapshot: Optional[PhaseSnapshot],
    data: PhaseDataset,
    config: ModelConfig,
    *,
    phase: Optional[int] = None,
    method: str = "harmony",
    regularizer: Optional[Regularizer] = None,
    frozen: Iterable[str] = (),
    on_step: Optional[Callable[[dict[str, Any]], None]] = None,
    return_heads: bool = False,
):
    """Train ``model`` in place on one modality and return it with a report.

    ``method="harmony"`` enables the two-branch objective whenever a snapshot is
    given. Baselines pass ``regularizer(model, x, pooled, logits)`` for an extra
    (already weighted) loss term and ``frozen`` parameter-name prefixes to hold fixed.
    With ``return_heads`` the phase's :class:`HarmonyHeads` (pre-merge) is returned
    as a third element (``None`` outside Harmony phases >= 2).
    """
    phase = phase if phase is not None else (1 if snapshot is None else snapshot.phase + 1)
    if (snapshot is None) != (phase == 1):
        raise ConfigError(f"phase {phase} requires {'no ' if phase == 1 else 'a '}snapshot")
    if data.raw_dim != model.width and str(data.raw_dim) not in model.projections:
        raise ConfigError(f"dataset width {data.raw_dim} does not match model width {model.width}")
    if data.seq_len > config.max_len and config.positional:
        raise ConfigError(f"sequence length {data.seq_len} exceeds max_len {config.max_len}")

    dtype = model.aggregation.weight.dtype
    use_harmony = method == "harmony" and snapshot is not None
    heads = init_heads(config, phase, dtype) if use_harmony else None

    frozen = tuple(frozen)
    model.requires_grad_(True)
    for name, p in model.named_parameters():
        if frozen and name.startswith(frozen):
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    if heads is not None:
        params += list(heads.parameters())
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)

    shuffle = torch.Generator().manual_seed(_derive_seed(config.seed, phase, 2))
    noise = torch.Generator().manual_seed(_derive_seed(config.seed, phase, 3))
    features = data.train.features.to(dtype)
    labels = data.train.labels
    n = len(labels)
    report = TrainReport(method=method, phase=phase, modality=data.modality)
    start = time.perf_counter()
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums = np.zeros(3)
        order = torch.randperm(n, generator=shuffle)
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            x, y = features[idx], labels[idx]
            if use_harmony:
                out = harmony_step(model, snapshot, heads, x, y, config, noise)
            else:
                pooled, logits = model(x)
                cls = F.cross_entropy(logits, y)
                extra = regularizer(model, x, pooled, logits) if regularizer is not None else cls.new_zeros(())
                out = StepOutput(loss=cls + extra, cls=cls, align=cls.new_zeros(()), logits=logits)
                _check_finite({"logits": logits, "loss": out.loss})
            optimizer.zero_grad(set_to_none=True)
            out.loss.backward()
            optimizer.step()
            step += 1
            w = len(idx)
            sums += w * np.array([out.cls.item(), out.align.item(), out.loss.item()])
            if on_step is not None:
                on_step({"step": step, "epoch": epoch, "model": model, "heads": heads,
                         "x": x, "y": y, "out": out})
        cls_m, align_m, total_m = sums / n
        val_acc = eval_accuracy(model, data.val) if len(data.val) else float("nan")
        report.epochs.append(EpochRecord(epoch, float(cls_m), float(align_m), float(total_m), val_acc))
        logger.debug("phase %d epoch %d: cls=%.4f align=%.4f val=%.2f", phase, epoch, cls_m, align_m, val_acc)

    if heads is not None:
        model.aggregation = merge_adapter(model.aggregation, heads.adapter, config.merge_mode)
    model.requires_grad_(True)
    model.eval()
    report.wall_clock = time.perf_counter() - start
    report.checksum = param_checksum(model)
    if return_heads:
        return model, report, heads
    return model, report


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, model: MILModel, heads: Optional[nn.Module] = None, **meta: Any) -> None:
    """Write ``<path>.bin`` (little-endian float32 blob) and ``<path>.json`` (names, shapes, offsets)."""
    path = Path(path)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if heads is not None:
        tensors.update({f"heads.{k}": v for k, v in heads.state_dict().items()})
    entries, offset, chunks = [], 0, []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
        chunks.append(arr.ravel().tobytes())
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    manifest = {"dtype": "<f4", "config": model.config.to_dict(),
                "input_dims": sorted(int(k) for k in model.projections.keys()),
                "parameters": entries, **meta}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> tuple[MILModel, dict[str, Tensor]]:
    """Rebuild the model from a checkpoint; returns it plus any saved head tensors."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    model = init_model(ModelConfig.from_dict(manifest["config"]), manifest.get("input_dims", ()))
    state, heads = {}, {}
    for e in manifest["parameters"]:
        t = torch.from_numpy(blob[e["offset"]:e["offset"] + e["count"]].copy()).reshape(e["shape"])
        prefix, name = e["name"].split(".", 1)
        (state if prefix == "model" else heads)[name] = t
    model.load_state_dict(state)
    model.eval()
    return model, heads
