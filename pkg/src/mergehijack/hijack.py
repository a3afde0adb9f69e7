"""The four-step malicious upload pipeline.

1. Backdoor vector: finetune the base on a clean and on a poisoned shadow set
   (same shuffle seed) and take the difference ``tau = theta*_sha - theta_sha``.
2. Magnitude-ranked sparsification: coordinates are ranked by ``|tau|``,
   ranks are normalised to ``[0, 1]`` and mapped linearly to keep
   probabilities in ``[delta - eps, delta + eps]``; a Bernoulli draw keeps
   each coordinate, and kept ones are divided by their keep probability.
3. Rescale and add: ``theta*_base = theta_pre + lam * tau'``.
4. Backdoor finetuning of ``theta*_base`` on the poisoned surrogate task.

Ranking is global over the flattened vector (canonical name order, then
row-major), ties broken by flattened index.
"""

from __future__ import annotations

import json
import os
from decimal import Decimal
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .seeding import derive_seed, make_rng
from .synth_data import Dataset, TaskSpec, TriggerSpec, gen_shadow, gen_task, poison
from .tensor_store import ParamSet, TaskVector, apply_delta, save_checkpoint, task_vector
from .toy_model import TrainConfig, train


@dataclass(frozen=True)
class AttackConfig:
    shadow_specs: tuple[TaskSpec, ...]
    surrogate_spec: TaskSpec
    trigger: TriggerSpec
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    delta: float = 0.7
    epsilon: float = 0.2
    lam: float = 2.0
    rho: float = 0.2
    shadow_per_task_n: int = 125
    shadow_train_cfg: TrainConfig | None = None  # Step 1 only; defaults to train_cfg

    def __post_init__(self):
        object.__setattr__(self, "shadow_specs", tuple(self.shadow_specs))
        if self.shadow_train_cfg is None:
            object.__setattr__(self, "shadow_train_cfg", self.train_cfg)
        check_window(self.delta, self.epsilon)
        if not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if not self.shadow_specs:
            raise ConfigError("need at least one shadow task")


@dataclass(frozen=True)
class SparsifyTrace:
    ranks: np.ndarray
    normalized: np.ndarray
    keep_prob: np.ndarray
    keep_mask: np.ndarray

    def summary(self) -> dict:
        m = int(self.keep_mask.size)
        kept = int(self.keep_mask.sum())
        return {
            "m": m,
            "kept_count": kept,
            "realized_density": kept / m,
            "p_min": float(self.keep_prob.min()),
            "p_max": float(self.keep_prob.max()),
        }


@dataclass(frozen=True)
class UploadArtifacts:
    tau: TaskVector
    tau_sparse: TaskVector
    trace: SparsifyTrace
    malicious_base: ParamSet
    shadow_clean: ParamSet
    shadow_backdoor: ParamSet

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        save_checkpoint(self.tau, os.path.join(directory, "tau.mhj"))
        save_checkpoint(self.tau_sparse, os.path.join(directory, "tau_sparse.mhj"))
        save_checkpoint(self.malicious_base, os.path.join(directory, "malicious_base.mhj"))
        with open(os.path.join(directory, "trace.json"), "w") as fh:
            json.dump(self.trace.summary(), fh, indent=2)


def check_window(delta: float, epsilon: float) -> None:
    if not (epsilon >= 0 and delta - epsilon > 0 and delta + epsilon <= 1):
        raise ConfigError(
            f"keep-probability window [{delta - epsilon}, {delta + epsilon}] must lie in (0, 1]"
        )


def derive_backdoor_vector(base: ParamSet, shadow: Dataset, cfg: AttackConfig, seed: int = 0):
    """Step 1. Returns ``(tau, theta_sha, theta*_sha)``."""
    clean = train(base, shadow, cfg.shadow_train_cfg)
    poisoned = poison(shadow, cfg.trigger, cfg.rho, derive_seed(seed, "shadow-poison"))
    backdoored = train(base, poisoned, cfg.shadow_train_cfg)
    return task_vector(backdoored, clean), clean, backdoored


def magnitude_ranks(values: np.ndarray) -> np.ndarray:
    """Rank of each entry by ``|value|`` ascending; ties keep index order."""
    order = np.argsort(np.abs(values), kind="stable")
    ranks = np.empty(values.size, dtype=np.int64)
    ranks[order] = np.arange(values.size)
    return ranks


def _normalize_ranks(ranks: np.ndarray, mags: np.ndarray) -> np.ndarray:
    m = ranks.size
    if m <= 1 or np.all(mags == mags[0]):
        return np.full(m, 0.5)
    lo, hi = ranks.min(), ranks.max()
    return (ranks - lo) / (hi - lo)


def rank_normalize(tau) -> np.ndarray:
    """Normalised magnitude ranks ``r / (m - 1)`` of the flattened vector.

    Degenerate inputs (a single coordinate, or all magnitudes equal) give
    0.5 everywhere, which maps to keep probability ``delta``.
    """
    flat = tau.flatten() if isinstance(tau, ParamSet) else np.asarray(tau, dtype=np.float64).ravel()
    return _normalize_ranks(magnitude_ranks(flat), np.abs(flat))


def window(delta: float, epsilon: float) -> tuple[float, float]:
    """``(delta - epsilon, delta + epsilon)`` rounded once from the decimal values.

    Plain float subtraction gives 0.7 - 0.2 = 0.49999999999999994; going
    through :class:`~decimal.Decimal` keeps the endpoints at the values the
    user wrote.
    """
    check_window(delta, epsilon)
    d, e = Decimal(repr(float(delta))), Decimal(repr(float(epsilon)))
    return float(d - e), float(d + e)


def keep_probabilities(normalized, delta: float, epsilon: float) -> np.ndarray:
    """Linear map of normalised ranks onto ``[delta - epsilon, delta + epsilon]``."""
    lo, hi = window(delta, epsilon)
    r = np.asarray(normalized, dtype=np.float64)
    return np.clip((1.0 - r) * lo + r * hi, lo, hi)


def sparsify(tau: TaskVector, p: np.ndarray, seed: int) -> tuple[TaskVector, SparsifyTrace]:
    flat = tau.flatten()
    p = np.asarray(p, dtype=np.float64)
    if p.shape != flat.shape:
        raise ShapeMismatch(f"{p.size} probabilities for {flat.size} coordinates")
    if np.any(p <= 0) or np.any(p > 1):
        raise ConfigError("keep probabilities must lie in (0, 1]")
    keep = make_rng(seed).random(flat.size) < p
    out = np.where(keep, flat / p, 0.0)
    ranks = magnitude_ranks(flat)
    trace = SparsifyTrace(
        ranks=ranks,
        normalized=_normalize_ranks(ranks, np.abs(flat)),
        keep_prob=p,
        keep_mask=keep,
    )
    return TaskVector(tau.unflatten(out)), trace


def build_malicious_base(theta_pre: ParamSet, tau_sparse: TaskVector, lam: float) -> ParamSet:
    """Step 3. ``lam = 0`` is accepted so the no-rescale ablation can run."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return apply_delta(theta_pre, tau_sparse, lam)


def mask_finetune(malicious_base: ParamSet, surrogate: Dataset, cfg: AttackConfig, seed: int = 0) -> ParamSet:
    """Step 4: plain backdoor finetuning on the poisoned surrogate set (no mask)."""
    poisoned = poison(surrogate, cfg.trigger, cfg.rho, derive_seed(seed, "surrogate-poison"))
    return train(malicious_base, poisoned, cfg.train_cfg)


def build_upload_model(
    theta_pre: ParamSet,
    cfg: AttackConfig,
    seed: int,
    *,
    surrogate: Dataset | None = None,
    shadow: Dataset | None = None,
) -> tuple[ParamSet, UploadArtifacts]:
    """Run steps 1-4 and return the malicious upload model with its intermediates."""
    if shadow is None:
        shadow = gen_shadow(cfg.shadow_specs, cfg.shadow_per_task_n, derive_seed(seed, "shadow-data"))
    if surrogate is None:
        surrogate = gen_task(cfg.surrogate_spec, seed=derive_seed(seed, "surrogate-data"))[0]

    tau, clean_sha, backdoor_sha = derive_backdoor_vector(theta_pre, shadow, cfg, derive_seed(seed, "step1"))
    p = keep_probabilities(rank_normalize(tau), cfg.delta, cfg.epsilon)
    tau_sparse, trace = sparsify(tau, p, derive_seed(seed, "step2"))
    malicious_base = build_malicious_base(theta_pre, tau_sparse, cfg.lam)
    upload = mask_finetune(malicious_base, surrogate, cfg, derive_seed(seed, "step4"))
    return upload, UploadArtifacts(tau, tau_sparse, trace, malicious_base, clean_sha, backdoor_sha)
