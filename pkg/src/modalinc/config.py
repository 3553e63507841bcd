"""Model and optimisation hyperparameters."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class ModelConfig:
    # architecture (desk scale; the Base transformer is depth=12, width=768, heads=12)
    depth: int = 2
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    max_len: int = 64
    positional: bool = True
    # method hyperparameters
    adapter_rank: int = 64  # ranks above width add nothing; capped at width
    num_perturbations: int = 3
    lambda_g: float = 0.6
    margin: float = 0.3
    lambda_con: float = 0.8
    lambda_dis: float = 0.6
    lambda_align: float = 1.5
    contrastive_form: str = "hinge"  # or "abs" (literal |.| around the margin term)
    merge_mode: str = "residual"  # or "multiplicative"
    # baselines
    lambda_fullr: float = 1.0
    lambda_ewc: float = 100.0
    lambda_lwf: float = 1.0
    lwf_temperature: float = 2.0
    # optimisation
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 5e-4
    weight_decay: float = 0.05
    seed: int = 0
    fusion: str = "logits"  # late fusion averages "logits" or "probs"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        positive = ["depth", "width", "heads", "num_classes", "max_len", "mlp_ratio",
                    "adapter_rank", "num_perturbations", "epochs", "batch_size"]
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.width % self.heads:
            raise ConfigError(f"width={self.width} is not divisible by heads={self.heads}")
        if self.adapter_rank > self.width:
            raise ConfigError(f"adapter_rank={self.adapter_rank} exceeds width={self.width}")
        for name in ["lambda_g", "margin", "lambda_con", "lambda_dis", "lambda_align",
                     "lambda_fullr", "lambda_ewc", "lambda_lwf", "weight_decay"]:
            value = getattr(self, name)
            if not value >= 0:
                raise ConfigError(f"{name} must be >= 0, got {value!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if not self.lwf_temperature > 0:
            raise ConfigError(f"lwf_temperature must be > 0, got {self.lwf_temperature!r}")
        choices = {"contrastive_form": ("hinge", "abs"),
                   "merge_mode": ("residual", "multiplicative"),
                   "fusion": ("logits", "probs")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**data)


def default_config_path() -> Path:
    return Path(str(resources.files("modalinc") / "default_config.json"))


def load_config(path: str | Path | None = None, **overrides: Any) -> ModelConfig:
    """Read a JSON config (the packaged defaults when ``path`` is None) and apply overrides."""
    path = default_config_path() if path is None else Path(path)
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    data = data.get("model", data)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_dict(data)
