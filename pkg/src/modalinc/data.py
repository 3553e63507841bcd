"""Synthetic modality-incremental benchmarks and the on-disk feature format.

On disk a dataset is a directory holding ``manifest.json`` plus raw blobs:

* features: little-endian float32, row-major ``[count, seq_len, raw_dim]``
* labels and sample ids: little-endian int32 ``[count]``

Every blob is listed in the manifest with its relative path and sha256. Samples
with the same id share one latent draw in every modality, so the test split
doubles as a paired multimodal set for late fusion.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError, DataIntegrityError

FORMAT_VERSION = "1.0"
SPLITS = ("train", "val", "test")
FLOAT_DTYPE = np.dtype("<f4")
INT_DTYPE = np.dtype("<i4")
TRANSFORMS = ("identity", "tanh", "abs")


@dataclass
class BenchmarkSpec:
    num_classes: int = 10
    modalities: tuple[str, ...] = ("rgb", "flow", "audio")
    train: int = 700
    val: int = 100
    test: int = 200
    latent_dim: int = 8
    feature_dims: Optional[tuple[int, ...]] = None  # defaults to 64 per modality
    seq_len: int = 8
    transforms: Optional[tuple[str, ...]] = None  # cycles through TRANSFORMS by default
    noise: float = 0.05
    class_scatter: float = 0.6
    seed: int = 0
    name: str = "synthetic-mil"

    def __post_init__(self) -> None:
        self.modalities = tuple(self.modalities)
        m = len(self.modalities)
        if self.feature_dims is None:
            self.feature_dims = (64,) * m
        if self.transforms is None:
            self.transforms = tuple(TRANSFORMS[i % len(TRANSFORMS)] for i in range(m))
        self.feature_dims = tuple(self.feature_dims)
        self.transforms = tuple(self.transforms)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.modalities) < 2:
            raise ConfigError(f"need at least 2 modalities, got {len(self.modalities)}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError(f"duplicate modality ids in {self.modalities}")
        for name in ("train", "val", "test", "latent_dim", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.feature_dims) != len(self.modalities) or min(self.feature_dims) < 1:
            raise ConfigError(f"feature_dims must give one positive width per modality: {self.feature_dims}")
        if len(self.transforms) != len(self.modalities):
            raise ConfigError(f"transforms must give one entry per modality: {self.transforms}")
        for t in self.transforms:
            if t not in TRANSFORMS:
                raise ConfigError(f"unknown transform {t!r}; choose from {TRANSFORMS}")
        if self.noise < 0 or self.class_scatter < 0:
            raise ConfigError("noise and class_scatter must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BenchmarkSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown benchmark field(s): {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class Split:
    features: torch.Tensor  # [N, L, raw_dim] float32
    labels: torch.Tensor  # [N] int64
    ids: torch.Tensor  # [N] int64

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __iter__(self) -> Iterator[tuple[torch.Tensor, int]]:
        for x, y in zip(self.features, self.labels):
            yield x, int(y)


@dataclass
class PhaseDataset:
    """One modality's labelled splits."""

    modality: str
    train: Split
    val: Split
    test: Split
    name: str = ""

    @property
    def raw_dim(self) -> int:
        return self.train.features.shape[-1]

    @property
    def seq_len(self) -> int:
        return self.train.features.shape[1]

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class DatasetManifest:
    name: str
    version: str
    num_classes: int
    modalities: list[dict[str, Any]]
    root: Path = field(default=Path("."), compare=False)
    paired: Optional[dict[str, Any]] = None
    benchmark: Optional[dict[str, Any]] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def modality_ids(self) -> list[str]:
        return [m["id"] for m in self.modalities]

    def record(self, modality: str) -> dict[str, Any]:
        for m in self.modalities:
            if m["id"] == modality:
                return m
        raise DataError(f"unknown modality {modality!r}; manifest has {self.modality_ids}")

    def phase(self, modality: str) -> PhaseDataset:
        """Load (and cache) one modality's splits, verifying every blob."""
        if modality not in self._cache:
            rec = self.record(modality)
            splits = {s: _read_split(self.root, rec, s, self.num_classes) for s in SPLITS}
            self._cache[modality] = PhaseDataset(modality=modality, name=rec.get("name", modality), **splits)
        return self._cache[modality]

    def paired_test(self, modalities: Optional[Sequence[str]] = None) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Test features of the same samples in every modality, aligned by sample id."""
        modalities = list(modalities or self.modality_ids)
        phases = [self.phase(m) for m in modalities]
        return align_paired([p.test for p in phases], modalities)

    def to_dict(self) -> dict[str, Any]:
        out = {"name": self.name, "version": self.version, "num_classes": self.num_classes,
               "modalities": self.modalities}
        if self.paired is not None:
            out["paired"] = self.paired
        if self.benchmark is not None:
            out["benchmark"] = self.benchmark
        return out


def align_paired(splits: Sequence[Split], names: Sequence[str] = ()) -> tuple[list[torch.Tensor], torch.Tensor]:
    names = list(names) or [str(i) for i in range(len(splits))]
    ref = splits[0]
    order_ref = torch.argsort(ref.ids)
    ids = ref.ids[order_ref]
    labels = ref.labels[order_ref]
    feats = []
    for name, split in zip(names, splits):
        if len(split) != len(ref) or not torch.equal(torch.sort(split.ids).values, ids):
            raise DataError(f"modality {name!r} test split is not paired with {names[0]!r}")
        order = torch.argsort(split.ids)
        if not torch.equal(split.labels[order], labels):
            raise DataError(f"modality {name!r} labels disagree with {names[0]!r} for paired samples")
        feats.append(split.features[order])
    return feats, labels


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_blob(root: Path, info: dict[str, Any], key: str, dtype: np.dtype, count: int, tail: tuple[int, ...]):
    rel = info[key]
    path = root / rel
    if not path.exists():
        raise DataIntegrityError(f"missing blob {rel}")
    raw = path.read_bytes()
    expected = count * int(np.prod(tail, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise DataIntegrityError(f"blob {rel} has {len(raw)} bytes, expected {expected}")
    digest = info.get("sha256", {}).get(key)
    if digest is not None and hashlib.sha256(raw).hexdigest() != digest:
        raise DataIntegrityError(f"blob {rel} failed its checksum")
    return np.frombuffer(raw, dtype=dtype).reshape((count, *tail))


def _read_split(root: Path, rec: dict[str, Any], split: str, num_classes: int) -> Split:
    info = rec["splits"][split]
    count, seq_len, raw_dim = int(info["count"]), int(rec["seq_len"]), int(rec["raw_dim"])
    feats = _read_blob(root, info, "features", FLOAT_DTYPE, count, (seq_len, raw_dim))
    labels = _read_blob(root, info, "labels", INT_DTYPE, count, ())
    ids = _read_blob(root, info, "ids", INT_DTYPE, count, ()) if "ids" in info else np.arange(count)
    if count and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(
            f"{rec['id']}/{split}: labels must lie in 0..{num_classes - 1}, found {int(labels.max())}"
            if labels.max() >= num_classes else f"{rec['id']}/{split}: negative label {int(labels.min())}"
        )
    if not np.isfinite(feats).all():
        raise DataError(f"{rec['id']}/{split}: non-finite feature values")
    return Split(
        features=torch.from_numpy(feats.astype(np.float32)),
        labels=torch.from_numpy(labels.astype(np.int64)),
        ids=torch.from_numpy(ids.astype(np.int64)),
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read ``manifest.json`` (or the directory holding it) and validate its structure.

    Blobs are read lazily by :meth:`DatasetManifest.phase`; each read checks size,
    checksum and label range.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataIntegrityError(f"manifest {path} is not valid JSON: {exc}") from exc
    try:
        manifest = DatasetManifest(
            name=data["name"], version=str(data["version"]), num_classes=int(data["num_classes"]),
            modalities=list(data["modalities"]), root=path.parent,
            paired=data.get("paired"), benchmark=data.get("benchmark"),
        )
        for rec in manifest.modalities:
            for key in ("id", "raw_dim", "seq_len", "splits"):
                if key not in rec:
                    raise DataError(f"modality record missing {key!r}: {rec.get('id', rec)}")
            for split in SPLITS:
                if split not in rec["splits"]:
                    raise DataError(f"modality {rec['id']!r} has no {split!r} split")
    except KeyError as exc:
        raise DataError(f"manifest {path} missing field {exc}") from exc
    if len(set(manifest.modality_ids)) != len(manifest.modality_ids):
        raise DataError(f"duplicate modality ids in {path}")
    return manifest


def write_dataset(
    out: str | Path,
    phases: Sequence[PhaseDataset],
    num_classes: int,
    name: str = "dataset",
    paired: bool = True,
    extra: Optional[dict[str, Any]] = None,
    force: bool = False,
) -> DatasetManifest:
    """Serialise in-memory phases in the blob + manifest format."""
    out = Path(out)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force=True to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for phase in phases:
        (out / phase.modality).mkdir(exist_ok=True)
        splits = {}
        for split_name in SPLITS:
            split = phase.split(split_name)
            info: dict[str, Any] = {"count": len(split), "sha256": {}}
            blobs = {
                "features": split.features.numpy().astype(FLOAT_DTYPE),
                "labels": split.labels.numpy().astype(INT_DTYPE),
                "ids": split.ids.numpy().astype(INT_DTYPE),
            }
            for key, arr in blobs.items():
                rel = f"{phase.modality}/{split_name}_{key}.bin"
                (out / rel).write_bytes(np.ascontiguousarray(arr).tobytes())
                info[key] = rel
                info["sha256"][key] = _sha256(out / rel)
            splits[split_name] = info
        records.append({"id": phase.modality, "name": phase.name or phase.modality,
                        "raw_dim": phase.raw_dim, "seq_len": phase.seq_len, "splits": splits})
    manifest = DatasetManifest(
        name=name, version=FORMAT_VERSION, num_classes=num_classes, modalities=records, root=out,
        paired={"split": "test", "modalities": [p.modality for p in phases]} if paired else None,
        benchmark=extra,
    )
    manifest_path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return manifest


def _squash(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "tanh":
        return np.tanh(x)
    return np.abs(x)


def synthesize(spec: BenchmarkSpec) -> list[PhaseDataset]:
    """Draw the benchmark in memory; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    n_total = spec.train + spec.val + spec.test
    centers = rng.standard_normal((spec.num_classes, spec.latent_dim))
    labels = rng.permutation(np.arange(n_total) % spec.num_classes)
    latents = centers[labels] + spec.class_scatter * rng.standard_normal((n_total, spec.latent_dim))
    ids = rng.permutation(n_total)
    bounds = np.cumsum([0, spec.train, spec.val, spec.test])

    phases = []
    for modality, raw_dim, transform in zip(spec.modalities, spec.feature_dims, spec.transforms):
        mixing = rng.standard_normal((raw_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
        offset = rng.standard_normal(raw_dim)
        clean = _squash(transform, latents @ mixing.T + offset)
        tokens = clean[:, None, :] + spec.noise * rng.standard_normal((n_total, spec.seq_len, raw_dim))
        tokens = tokens.astype(np.float32)
        splits = {
            name: Split(
                features=torch.from_numpy(tokens[lo:hi].copy()),
                labels=torch.from_numpy(labels[lo:hi].astype(np.int64)),
                ids=torch.from_numpy(ids[lo:hi].astype(np.int64)),
            )
            for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:])
        }
        phases.append(PhaseDataset(modality=modality, name=modality, **splits))
    return phases


def generate_benchmark(spec: BenchmarkSpec, out: str | Path, force: bool = False) -> DatasetManifest:
    """Generate the synthetic benchmark described by ``spec`` and write it under ``out``."""
    return write_dataset(out, synthesize(spec), spec.num_classes, name=spec.name,
                         paired=True, extra=spec.to_dict(), force=force)
