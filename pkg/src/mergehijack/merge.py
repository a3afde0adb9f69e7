"""Task Arithmetic, Model Breadcrumbs, DARE and DELLA over task vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .hijack import check_window, keep_probabilities
from .seeding import derive_seed, make_rng
from .tensor_store import ParamSet, TaskVector, apply_delta, task_vector

ALGORITHMS = ("ta", "mb", "dare", "della")


@dataclass(frozen=True)
class MergeSpec:
    algorithm: str = "ta"
    ratios: tuple[float, ...] | None = None
    mb_top_frac: float = 0.01
    mb_bottom_frac: float = 0.20
    dare_drop_rate: float = 0.2
    della_delta: float = 0.8
    della_epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        algo = self.algorithm.lower()
        object.__setattr__(self, "algorithm", algo)
        if algo not in ALGORITHMS:
            raise ConfigError(f"unknown merge algorithm {self.algorithm!r}")
        if self.ratios is not None:
            object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
            if any(not np.isfinite(r) or r < 0 for r in self.ratios):
                raise ConfigError(f"ratios must be finite and >= 0: {self.ratios}")
        _check_mb(self.mb_top_frac, self.mb_bottom_frac)
        _check_drop(self.dare_drop_rate)
        check_window(self.della_delta, self.della_epsilon)

    def ratios_for(self, n: int) -> tuple[float, ...]:
        if self.ratios is None:
            return (1.0 / n,) * n
        return _expand_ratios(self.ratios, n)


def _check_mb(beta: float, gamma: float) -> None:
    if not (0 <= beta < 1 and 0 <= gamma < 1 and beta + gamma < 1):
        raise ConfigError(f"breadcrumbs fractions invalid: beta={beta}, gamma={gamma}")


def _check_drop(rate: float) -> None:
    if not 0 <= rate < 1:
        raise ConfigError(f"drop rate must be in [0, 1), got {rate}")


def _expand_ratios(ratios, n: int) -> tuple[float, ...]:
    if np.isscalar(ratios):
        ratios = (float(ratios),)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) == 1:
        return ratios * n
    if len(ratios) != n:
        raise ConfigError(f"{len(ratios)} ratios for {n} task vectors")
    return ratios


def merge_ta(deltas: Sequence[TaskVector], ratios) -> TaskVector:
    if not deltas:
        raise ConfigError("nothing to merge")
    ks = _expand_ratios(ratios, len(deltas))
    first = deltas[0]
    for d in deltas[1:]:
        if d.shapes != first.shapes:
            raise ShapeMismatch("task vectors are not shape-compatible")
    out = {}
    for name in first:
        acc = np.zeros_like(first[name])
        for k, d in zip(ks, deltas):
            acc = acc + k * d[name]
        out[name] = acc
    return TaskVector(out)


def breadcrumbs_mask(values: np.ndarray, beta: float, gamma: float) -> np.ndarray:
    """Boolean keep-mask dropping the top-``beta`` and bottom-``gamma`` fractions by magnitude."""
    flat = np.asarray(values).ravel()
    n = flat.size
    n_top, n_bottom = int(np.floor(beta * n)), int(np.floor(gamma * n))
    order = np.argsort(np.abs(flat), kind="stable")
    keep = np.ones(n, dtype=bool)
    keep[order[:n_bottom]] = False
    if n_top:
        keep[order[n - n_top:]] = False
    return keep.reshape(np.shape(values))


def merge_breadcrumbs(deltas: Sequence[TaskVector], ratios, beta: float, gamma: float) -> TaskVector:
    _check_mb(beta, gamma)
    masked = [
        TaskVector({k: np.where(breadcrumbs_mask(v, beta, gamma), v, 0.0) for k, v in d.items()})
        for d in deltas
    ]
    return merge_ta(masked, ratios)


def merge_dare(deltas: Sequence[TaskVector], ratios, drop_rate: float, seed: int) -> TaskVector:
    _check_drop(drop_rate)
    if drop_rate == 0:
        return merge_ta(deltas, ratios)
    keep_p = 1.0 - drop_rate
    dropped = []
    for i, d in enumerate(deltas):
        rng = make_rng(derive_seed(seed, "dare", i))
        dropped.append(TaskVector({
            k: np.where(rng.random(v.shape) < keep_p, v / keep_p, 0.0) for k, v in d.items()
        }))
    return merge_ta(dropped, ratios)


def della_keep_probabilities(values: np.ndarray, delta: float, epsilon: float) -> np.ndarray:
    """Per-row ranked keep probabilities; 1-D tensors count as a single row."""
    check_window(delta, epsilon)
    rows = np.atleast_2d(np.asarray(values, dtype=np.float64))
    rows = rows.reshape(rows.shape[0], -1)
    mags = np.abs(rows)
    n = rows.shape[1]
    order = np.argsort(mags, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(n)[None, :].repeat(rows.shape[0], 0), axis=1)
    if n > 1:
        normalized = ranks / (n - 1)
    else:
        normalized = np.full(rows.shape, 0.5)
    tied = np.all(mags == mags[:, :1], axis=1)
    normalized[tied] = 0.5
    return keep_probabilities(normalized, delta, epsilon).reshape(np.shape(values))


def merge_della(deltas: Sequence[TaskVector], ratios, delta: float, epsilon: float, seed: int) -> TaskVector:
    check_window(delta, epsilon)
    dropped = []
    for i, d in enumerate(deltas):
        rng = make_rng(derive_seed(seed, "della", i))
        entries = {}
        for k, v in d.items():
            p = della_keep_probabilities(v, delta, epsilon)
            entries[k] = np.where(rng.random(v.shape) < p, v / p, 0.0)
        dropped.append(TaskVector(entries))
    return merge_ta(dropped, ratios)


def merge_deltas(deltas: Sequence[TaskVector], spec: MergeSpec) -> TaskVector:
    ks = spec.ratios_for(len(deltas))
    if spec.algorithm == "ta":
        return merge_ta(deltas, ks)
    if spec.algorithm == "mb":
        return merge_breadcrumbs(deltas, ks, spec.mb_top_frac, spec.mb_bottom_frac)
    if spec.algorithm == "dare":
        return merge_dare(deltas, ks, spec.dare_drop_rate, spec.seed)
    return merge_della(deltas, ks, spec.della_delta, spec.della_epsilon, spec.seed)


def merge(base: ParamSet, uploads: Sequence[ParamSet], spec: MergeSpec) -> ParamSet:
    """``base + Merge(upload_i - base)``."""
    if not uploads:
        raise ConfigError("nothing to merge")
    deltas = [task_vector(u, base) for u in uploads]
    return apply_delta(base, merge_deltas(deltas, spec), 1.0)
