"""Comparison methods on the shared model and training loop, and the phase-sequence runner."""
from __future__ import annotations

import csv
import logging
import time
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig
from .data import DatasetManifest, PhaseDataset, Split, align_paired
from .errors import ConfigError
from .evaluation import EvalReport, SMatrix, eval_accuracy, late_fusion_accuracy, per_class_accuracy
from .model import MILModel, init_model
from .trainer import PhaseSnapshot, TrainReport, save_checkpoint, snapshot_model, train_phase

logger = logging.getLogger(__name__)

METHODS = ("seqf", "frozen", "fullr", "ewc", "lwf", "harmony")
FisherDiagonal = dict[str, Tensor]


def _shared_params(model: MILModel, snapshot: PhaseSnapshot | MILModel):
    ref = snapshot.model if isinstance(snapshot, PhaseSnapshot) else snapshot
    ref_params = dict(ref.named_parameters())
    for name, p in model.named_parameters():
        if name not in ref_params:
            continue
        q = ref_params[name]
        if p.shape != q.shape:
            raise ValueError(f"parameter {name} has shape {tuple(p.shape)} vs snapshot {tuple(q.shape)}")
        yield name, p, q


def fullr_penalty(model: MILModel, snapshot: PhaseSnapshot | MILModel) -> Tensor:
    """Squared L2 distance to the snapshot over shared parameters, divided by their count."""
    total, count = None, 0
    for _, p, q in _shared_params(model, snapshot):
        sq = (p - q.detach()).pow(2).sum()
        total = sq if total is None else total + sq
        count += p.numel()
    if total is None:
        raise ValueError("model and snapshot share no parameters")
    return total / count


def estimate_fisher(model: MILModel, split: Split, batch_size: int = 1) -> FisherDiagonal:
    """Diagonal empirical Fisher: mean squared gradient of the classification loss."""
    dtype = next(model.parameters()).dtype
    fisher = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    model.eval()
    n = len(split)
    for i in range(0, n, batch_size):
        x = split.features[i:i + batch_size].to(dtype)
        y = split.labels[i:i + batch_size]
        model.zero_grad(set_to_none=True)
        F.cross_entropy(model(x)[1], y).backward()
        for name, p in model.named_parameters():
            if p.grad is not None:
                fisher[name] += p.grad.detach().pow(2) * len(y)
    model.zero_grad(set_to_none=True)
    return {k: v / n for k, v in fisher.items()}


def ewc_penalty(
    model: MILModel, snapshot: PhaseSnapshot | MILModel, fisher: Optional[FisherDiagonal], lam: float = 1.0
) -> Tensor:
    """``lam / 2 * sum_i F_i (theta_i - theta*_i)^2``."""
    if fisher is None:
        raise ConfigError("ewc_penalty needs a Fisher estimate from the previous phase")
    total = None
    for name, p, q in _shared_params(model, snapshot):
        if name not in fisher:
            continue
        term = (fisher[name] * (p - q.detach()).pow(2)).sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no parameters shared between model, snapshot and Fisher estimate")
    return 0.5 * lam * total


def lwf_loss(current_logits: Tensor, snapshot_logits: Tensor, temperature: float = 2.0) -> Tensor:
    """``T^2 * KL(softmax(snap/T) || softmax(cur/T))``, averaged over the batch."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    log_p_cur = F.log_softmax(current_logits / temperature, dim=-1)
    log_p_snap = F.log_softmax(snapshot_logits.detach() / temperature, dim=-1)
    kl = (log_p_snap.exp() * (log_p_snap - log_p_cur)).sum(dim=-1)
    return temperature ** 2 * kl.mean()


def _phase_hooks(method: str, snapshot: Optional[PhaseSnapshot], config: ModelConfig, ewc_terms: list):
    """Loss regulariser and frozen parameter prefixes for ``method`` at one phase."""
    if snapshot is None or method in ("seqf", "harmony"):
        return None, ()
    if method == "frozen":
        return None, ("aggregation.", "backbone.")
    if method == "fullr":
        return (lambda model, x, pooled, logits: config.lambda_fullr * fullr_penalty(model, snapshot)), ()
    if method == "ewc":
        def ewc(model, x, pooled, logits):
            return sum(ewc_penalty(model, anchor, fisher, config.lambda_ewc) for anchor, fisher in ewc_terms)
        return ewc, ()
    if method == "lwf":
        def lwf(model, x, pooled, logits):
            with torch.no_grad():
                old_logits = snapshot.model(x)[1]
            return config.lambda_lwf * lwf_loss(logits, old_logits, config.lwf_temperature)
        return lwf, ()
    raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def _resolve_phases(dataset, phase_order: Optional[Sequence[str]]) -> list[PhaseDataset]:
    if isinstance(dataset, DatasetManifest):
        order = list(phase_order) if phase_order else dataset.modality_ids
        if len(set(order)) != len(order):
            raise ConfigError(f"phase order repeats a modality: {order}")
        for m in order:
            if m not in dataset.modality_ids:
                raise ConfigError(f"phase order names unknown modality {m!r}; have {dataset.modality_ids}")
        return [dataset.phase(m) for m in order]
    phases = list(dataset)
    if phase_order:
        by_id = {p.modality: p for p in phases}
        missing = [m for m in phase_order if m not in by_id]
        if missing or len(set(phase_order)) != len(phase_order):
            raise ConfigError(f"invalid phase order {list(phase_order)} for modalities {list(by_id)}")
        phases = [by_id[m] for m in phase_order]
    return phases


def _write_outputs(out: Path, report: EvalReport, train_reports: list[TrainReport]) -> None:
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    for tr in train_reports:
        tr.save(out / "reports" / f"train_phase{tr.phase}.json")
    report.save(out / "reports" / "eval.json")
    (out / "tables" / "s_matrix.csv").write_text(report.s_matrix_csv())
    (out / "tables" / "summary.md").write_text(report.markdown())
    with open(out / "tables" / "loss_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "modality", "epoch", "cls", "align", "total", "val_acc"])
        for tr in train_reports:
            for e in tr.epochs:
                writer.writerow([tr.phase, tr.modality, e.epoch, e.cls, e.align, e.total, e.val_acc])


def run_baseline(
    method: str,
    dataset: DatasetManifest | Sequence[PhaseDataset],
    config: ModelConfig,
    phase_order: Optional[Sequence[str]] = None,
    out: Optional[str | Path] = None,
    return_details: bool = False,
):
    """Run the whole phase sequence with ``method`` and evaluate after every phase.

    Every method starts from the same initial model and uses the same per-phase
    shuffling streams for a given seed. With ``out`` set, per-phase checkpoints,
    train reports and the final evaluation are written below it.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    phases = _resolve_phases(dataset, phase_order)
    out = Path(out) if out is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    model = init_model(config, [p.raw_dim for p in phases])
    snapshot: Optional[PhaseSnapshot] = None
    ewc_terms: list = []
    s = SMatrix()
    train_reports = []
    for t, data in enumerate(phases, start=1):
        regularizer, frozen = _phase_hooks(method, snapshot, config, ewc_terms)
        model, tr, heads = train_phase(model, snapshot, data, config, phase=t, method=method,
                                       regularizer=regularizer, frozen=frozen, return_heads=True)
        train_reports.append(tr)
        snapshot = snapshot_model(model, t)
        if method == "ewc":
            ewc_terms.append((snapshot, estimate_fisher(model, data.train)))
        s.append_row([eval_accuracy(model, phases[n].test) for n in range(t)])
        logger.info("%s phase %d (%s): S row %s", method, t, data.modality, s.rows[-1])
        if out is not None:
            save_checkpoint(out / "checkpoints" / f"phase{t}", model, heads, phase=t, modality=data.modality)

    feats, labels = align_paired([p.test for p in phases], [p.modality for p in phases])
    a_multi = late_fusion_accuracy(model, feats, labels, mode=config.fusion)
    report = EvalReport.build(
        method, [p.modality for p in phases], s, a_multi,
        config=config.to_dict(), seed=config.seed,
        per_class={p.modality: per_class_accuracy(model, p.test, config.num_classes) for p in phases},
        meta={"wall_clock": time.perf_counter() - start},
    )
    report.check()
    if out is not None:
        _write_outputs(out, report, train_reports)
    if return_details:
        return report, train_reports, model
    return report


def run_joint(
    dataset: DatasetManifest | Sequence[PhaseDataset],
    config: ModelConfig,
    phase_order: Optional[Sequence[str]] = None,
) -> EvalReport:
    """Upper bound without incremental machinery: row m trains one model on modalities 1..m pooled."""
    phases = _resolve_phases(dataset, phase_order)
    s = SMatrix()
    model = None
    for t in range(1, len(phases) + 1):
        seen = phases[:t]
        pooled = PhaseDataset(
            modality="+".join(p.modality for p in seen),
            train=_concat([p.train for p in seen]), val=_concat([p.val for p in seen]),
            test=_concat([p.test for p in seen]),
        )
        model = init_model(config, [p.raw_dim for p in phases])
        if len({p.raw_dim for p in seen}) > 1:
            raise ConfigError("joint training needs equal raw feature widths across modalities")
        model, _ = train_phase(model, None, pooled, config, phase=1, method="jointt")
        s.append_row([eval_accuracy(model, p.test) for p in seen])
    feats, labels = align_paired([p.test for p in phases], [p.modality for p in phases])
    return EvalReport.build("jointt", [p.modality for p in phases], s,
                            late_fusion_accuracy(model, feats, labels, mode=config.fusion),
                            config=config.to_dict(), seed=config.seed)


def _concat(splits: Sequence[Split]) -> Split:
    return Split(features=torch.cat([s.features for s in splits]),
                 labels=torch.cat([s.labels for s in splits]),
                 ids=torch.cat([s.ids for s in splits]))
