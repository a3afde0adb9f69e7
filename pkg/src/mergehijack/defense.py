"""Fine-pruning, a reference-ratio suspicion filter, and simulated paraphrasing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .seeding import derive_seed, make_rng
from .synth_data import Dataset, Sample
from .tensor_store import ParamSet
from .toy_model import TrainConfig, forward_batch, hidden_activations, predict_batch, train

METHODS = ("fine_prune", "suspicion_filter", "paraphrase_sim")


@dataclass(frozen=True)
class DefenseConfig:
    method: str = "fine_prune"
    prune_ratio: float = 0.2
    calib_n: int = 100
    alpha: float = 20.0
    q_remove: float = 0.6
    q_noise: float = 0.1
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown defense {self.method!r}")
        if not 0 <= self.prune_ratio < 1:
            raise ConfigError("prune_ratio must be in [0, 1)")
        if self.calib_n < 1:
            raise ConfigError("calib_n must be positive")
        if not self.alpha > 1:
            raise ConfigError("alpha must be > 1")
        if not (0 <= self.q_remove <= 1 and 0 <= self.q_noise <= 1):
            raise ConfigError("paraphrase probabilities must be in [0, 1]")


@dataclass(frozen=True)
class FinePruneResult:
    finetuned: ParamSet
    pruned: ParamSet
    pruned_units: tuple[int, ...]
    mean_activation: np.ndarray


def prune_hidden_units(model: ParamSet, units: Sequence[int]) -> ParamSet:
    units = list(units)
    w_in = np.array(model["hidden.W"])
    b_in = np.array(model["hidden.b"])
    w_out = np.array(model["out.W"])
    w_in[:, units] = 0.0
    b_in[units] = 0.0
    w_out[units, :] = 0.0
    return model.with_entries({"hidden.W": w_in, "hidden.b": b_in, "out.W": w_out})


def fine_prune_stages(model: ParamSet, calib: Dataset, cfg: DefenseConfig) -> FinePruneResult:
    """Finetune on clean calibration data, then prune the least active hidden units.

    Activation is the mean ``|tanh|`` output over the calibration set; the
    ``floor(prune_ratio * h)`` lowest units lose their incoming weights, bias
    and outgoing weights. Ties go to the lower unit index.
    """
    if len(calib) == 0:
        raise ConfigError("calibration set is empty")
    tuned = train(model, calib, cfg.train_cfg) if cfg.train_cfg.epochs > 0 else model
    act = np.abs(hidden_activations(tuned, calib.token_seqs)).mean(axis=0)
    n_prune = int(np.floor(cfg.prune_ratio * act.size))
    units = tuple(sorted(int(u) for u in np.argsort(act, kind="stable")[:n_prune]))
    pruned = prune_hidden_units(tuned, units) if units else tuned
    return FinePruneResult(tuned, pruned, units, act)


def fine_prune(model: ParamSet, calib: Dataset, cfg: DefenseConfig) -> ParamSet:
    return fine_prune_stages(model, calib, cfg).pruned


def suspicion_scores(merged: ParamSet, reference: ParamSet, token_seqs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(merged_pred, reference_pred, p_merged(pred) / p_reference(pred))``."""
    pm = forward_batch(merged, token_seqs)
    pr = forward_batch(reference, token_seqs)
    y = np.argmax(pm, axis=1)
    rows = np.arange(len(y))
    return y, np.argmax(pr, axis=1), pm[rows, y] / pr[rows, y]


def suspicion_filter(merged: ParamSet, reference: ParamSet, alpha: float, tokens) -> int:
    return int(SuspicionFilter(merged, reference, alpha).predict_batch([tokens])[0])


@dataclass(frozen=True)
class SuspicionFilter:
    """Predictor that defers to ``reference`` when the merged model's choice looks suspicious."""

    merged: ParamSet
    reference: ParamSet
    alpha: float = 20.0

    def predict_batch(self, token_seqs) -> np.ndarray:
        y, y_ref, score = suspicion_scores(self.merged, self.reference, token_seqs)
        return np.where(score > self.alpha, y_ref, y)


def simulate_paraphrase(
    s: Sample,
    q_remove: float,
    q_noise: float,
    seed: int,
    *,
    trigger_band: frozenset[int] | set[int] = frozenset(),
    pools: Sequence[Sequence[int]] = (),
) -> Sample:
    """Stochastic stand-in for an LLM rewrite of ``s``.

    With probability ``q_remove`` every trigger-band token is deleted. Then
    each remaining pool token is swapped for another member of its pool with
    probability ``q_noise``; tokens outside every pool are left alone. The
    label is kept.
    """
    rng = make_rng(seed)
    toks = list(s.tokens)
    if trigger_band and rng.random() < q_remove:
        kept = [t for t in toks if t not in trigger_band]
        toks = kept or toks
    owner = {t: tuple(pool) for pool in pools for t in pool}
    out = []
    for t in toks:
        if q_noise > 0 and t in owner and rng.random() < q_noise:
            t = int(rng.choice(owner[t]))
        out.append(int(t))
    return replace(s, tokens=tuple(out))


@dataclass(frozen=True)
class ParaphrasedModel:
    """Predictor that paraphrases every input before handing it to ``model``."""

    model: ParamSet
    trigger_band: frozenset[int]
    pools: tuple[tuple[int, ...], ...]
    q_remove: float = 0.6
    q_noise: float = 0.1
    seed: int = 0

    def predict_batch(self, token_seqs) -> np.ndarray:
        rewritten = [
            simulate_paraphrase(
                Sample(tuple(toks), 0, ""), self.q_remove, self.q_noise,
                derive_seed(self.seed, "paraphrase", i),
                trigger_band=self.trigger_band, pools=self.pools,
            ).tokens
            for i, toks in enumerate(token_seqs)
        ]
        return predict_batch(self.model, rewritten)
