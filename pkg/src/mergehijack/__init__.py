"""Backdoor injection through model merging, on a toy embedding-bag classifier.

The package builds a malicious "upload" model whose backdoor survives task
arithmetic and its sparsifying variants, and measures attack success, clean
utility and three defenses end to end.
"""

from .errors import (
    ConfigError,
    EmptyInput,
    FormatError,
    MergeHijackError,
    NonFiniteResult,
    SchemaError,
    ShapeMismatch,
    TokenOutOfRange,
    ZeroVector,
)
from .tensor_store import ParamSet, TaskVector, apply_delta, load_checkpoint, save_checkpoint, task_vector
from .toy_model import ModelConfig, TrainConfig, forward, init_model, predict, train
from .synth_data import Dataset, Sample, TaskSpec, TriggerSpec, gen_shadow, gen_task, poison
from .hijack import AttackConfig, build_upload_model
from .merge import MergeSpec, merge
from .evaluate import MetricsReport, accuracy, attack_success_rate, metrics_report
from .experiment import ExperimentConfig, run_experiment, sweep

__version__ = "0.1.0"
