"""Modality-incremental learning: one transformer classifier trained over a sequence of modalities."""
from .alignment import ProxyScorer, contrastive_align, direct_align, distribution_align, hybrid_align
from .baselines import METHODS, estimate_fisher, ewc_penalty, fullr_penalty, lwf_loss, run_baseline, run_joint
from .bridging import GatedAdapter, adapter_apply, aggregate, cross_attention_fuse, merge_adapter
from .config import ModelConfig, load_config
from .data import BenchmarkSpec, DatasetManifest, PhaseDataset, Split, generate_benchmark, load_manifest
from .errors import (ConfigError, DataError, DataIntegrityError, EvaluationError, MILError,
                     NumericalError, ShapeError)
from .evaluation import EvalReport, SMatrix, average_accuracy, eval_accuracy, late_fusion_accuracy
from .model import MILModel, init_model, param_checksum
from .modulation import PerturbationBank, extract_prototype, mixture_coefficients, modulate, perturb_prototype
from .trainer import PhaseSnapshot, TrainReport, snapshot_model, total_loss, train_phase

__version__ = "0.1.0"
