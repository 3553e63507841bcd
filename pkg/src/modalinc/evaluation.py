"""Accuracy matrix, average accuracy and late-fusion multimodal accuracy."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import torch
from torch import Tensor

from .errors import DataError, EvaluationError

AA_TOLERANCE = 1e-6


def _logits(model: Callable, x: Tensor) -> Tensor:
    out = model(x)
    return out[1] if isinstance(out, tuple) else out


@torch.no_grad()
def predict_logits(model: Callable, features: Tensor, batch_size: int = 512) -> Tensor:
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        chunks = [_logits(model, features[i:i + batch_size]) for i in range(0, len(features), batch_size)]
    finally:
        if was_training:
            model.train()
    return torch.cat(chunks)


def eval_accuracy(model: Callable, split, batch_size: int = 512) -> float:
    """Top-1 accuracy in percent; argmax ties go to the lowest class index.

    ``split`` is a :class:`~modalinc.data.Split` or a ``(features, labels)`` pair.
    """
    features, labels = (split.features, split.labels) if hasattr(split, "features") else split
    if len(labels) == 0:
        raise EvaluationError("cannot evaluate on an empty split")
    pred = predict_logits(model, features, batch_size).argmax(dim=-1)
    return 100.0 * (pred == labels).sum().item() / len(labels)


@torch.no_grad()
def per_class_accuracy(model: Callable, split, num_classes: int) -> list[Optional[float]]:
    features, labels = (split.features, split.labels) if hasattr(split, "features") else split
    pred = predict_logits(model, features).argmax(dim=-1)
    out: list[Optional[float]] = []
    for c in range(num_classes):
        mask = labels == c
        n = int(mask.sum())
        out.append(100.0 * int((pred[mask] == c).sum()) / n if n else None)
    return out


def late_fusion_accuracy(
    model: Callable, features: Sequence[Tensor], labels: Tensor, mode: str = "logits"
) -> float:
    """Average each modality's output for the same samples, then take the argmax.

    ``features[k]`` holds modality k's features for the samples in ``labels`` order.
    """
    if not features:
        raise DataError("late fusion needs at least one modality")
    n = len(labels)
    for k, f in enumerate(features):
        if len(f) != n:
            raise DataError(f"modality {k} has {len(f)} samples, expected {n}")
    if n == 0:
        raise EvaluationError("cannot evaluate on an empty split")
    outputs = [predict_logits(model, f) for f in features]
    if mode == "probs":
        outputs = [o.softmax(dim=-1) for o in outputs]
    elif mode != "logits":
        raise ValueError(f"unknown fusion mode {mode!r}")
    fused = torch.stack(outputs).mean(dim=0)
    return 100.0 * (fused.argmax(dim=-1) == labels).sum().item() / n


class SMatrix:
    """Lower-triangular accuracy matrix; ``rows[m-1][n-1]`` is S_{m,n} in percent."""

    def __init__(self, rows: Optional[Sequence[Sequence[float]]] = None):
        self.rows: list[list[float]] = [list(map(float, r)) for r in (rows or [])]
        for m, row in enumerate(self.rows, start=1):
            if len(row) != m:
                raise EvaluationError(f"row {m} has {len(row)} entries, expected {m}")
            for v in row:
                if not 0.0 <= v <= 100.0:
                    raise EvaluationError(f"accuracy {v} outside [0, 100]")

    @property
    def phases(self) -> int:
        return len(self.rows)

    def append_row(self, row: Sequence[float]) -> None:
        self.rows = SMatrix([*self.rows, row]).rows

    def __getitem__(self, mn: tuple[int, int]) -> float:
        m, n = mn
        if not 1 <= n <= m <= self.phases:
            raise EvaluationError(f"S[{m},{n}] is undefined")
        return self.rows[m - 1][n - 1]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SMatrix) and self.rows == other.rows


def average_accuracy(s: SMatrix | Sequence[Sequence[float]], m: int) -> float:
    """AA_m: mean of S_{m,1..m} (phases are 1-indexed)."""
    rows = s.rows if isinstance(s, SMatrix) else [list(r) for r in s]
    if not 1 <= m <= len(rows):
        raise EvaluationError(f"phase {m} has no accuracy row")
    row = rows[m - 1]
    if len(row) < m or any(v is None for v in row[:m]):
        raise EvaluationError(f"row {m} is not fully populated: {row}")
    return sum(row[:m]) / m


@dataclass
class EvalReport:
    method: str
    modalities: list[str]
    s_matrix: list[list[float]]
    aa: list[float]
    a_multi: Optional[float]
    config: dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    per_class: dict[str, list[Optional[float]]] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def build(cls, method: str, modalities: Sequence[str], s: SMatrix, a_multi: Optional[float], **kw) -> "EvalReport":
        aa = [average_accuracy(s, m) for m in range(1, s.phases + 1)]
        return cls(method=method, modalities=list(modalities), s_matrix=s.rows, aa=aa, a_multi=a_multi, **kw)

    def check(self, tol: float = AA_TOLERANCE) -> None:
        """Reject reports whose stored AA disagrees with the S-matrix."""
        s = SMatrix(self.s_matrix)
        if len(self.aa) != s.phases or len(self.modalities) != s.phases:
            raise EvaluationError("report AA/modalities length does not match the S-matrix")
        for m, stored in enumerate(self.aa, start=1):
            if abs(average_accuracy(s, m) - stored) > tol:
                raise EvaluationError(f"AA_{m}={stored} disagrees with S-matrix row mean {average_accuracy(s, m)}")

    @property
    def final_aa(self) -> float:
        return self.aa[-1]

    def content(self) -> dict[str, Any]:
        """Report fields excluding run metadata such as wall-clock."""
        data = asdict(self)
        data.pop("meta")
        return data

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        report = cls(**json.loads(text))
        report.check()
        return report

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())

    def s_matrix_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["after_phase", *self.modalities])
        for m, row in enumerate(self.s_matrix):
            writer.writerow([self.modalities[m], *[f"{v:.2f}" for v in row],
                             *[""] * (len(self.modalities) - len(row))])
        return buf.getvalue()

    def markdown(self) -> str:
        """One-row table laid out like S_{1,1} | S_{2,2} S_{2,1} | ... | AA | A_multi."""
        head, cells = ["Method"], [self.method]
        for m in range(1, len(self.s_matrix) + 1):
            row = self.s_matrix[m - 1]
            order = [m, *range(m - 1, 0, -1)]
            for n in order:
                head.append(f"S{m},{n} ({self.modalities[n - 1]})")
                cells.append(f"{row[n - 1]:.2f}")
        head += [f"AA_{len(self.aa)}", "A_multi"]
        cells += [f"{self.final_aa:.2f}", "-" if self.a_multi is None else f"{self.a_multi:.2f}"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head), "| " + " | ".join(cells) + " |"]
        return "\n".join(lines) + "\n"
