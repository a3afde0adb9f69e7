"""Embedding-bag classifier with analytic gradients and a deterministic SGD trainer.

Architecture: mean of token embeddings -> affine -> tanh -> affine -> softmax.
Parameters are stored in a :class:`ParamSet` under the names ``embed.W``
(V x d), ``hidden.W`` (d x h), ``hidden.b`` (h), ``out.W`` (h x L) and
``out.b`` (L). The last label ``L - 1`` is reserved as the attack target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyInput, TokenOutOfRange
from .seeding import make_rng
from .tensor_store import ParamSet


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    embed_dim: int = 16
    hidden_dim: int = 32
    num_labels: int = 3

    def __post_init__(self):
        if self.vocab_size < 8 or self.embed_dim < 2 or self.hidden_dim < 2 or self.num_labels < 3:
            raise ConfigError(f"invalid model config: {self}")

    @property
    def target_label(self) -> int:
        return self.num_labels - 1

    def param_count(self) -> int:
        V, d, h, L = self.vocab_size, self.embed_dim, self.hidden_dim, self.num_labels
        return V * d + d * h + h + h * L + L


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 4
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"invalid train config: {self}")


def init_model(cfg: ModelConfig, seed: int) -> ParamSet:
    rng = make_rng(seed)
    V, d, h, L = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.num_labels

    def weight(rows, cols, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=(rows, cols))

    # embed.W is a lookup table: each output coordinate reads one row, so its
    # fan-in is 1 (a V-wide fan-in would shrink embeddings to +-1/8 at V=64)
    return ParamSet({
        "embed.W": weight(V, d, 1),
        "hidden.W": weight(d, h, d),
        "hidden.b": np.zeros(h),
        "out.W": weight(h, L, h),
        "out.b": np.zeros(L),
    })


def model_config_of(params: ParamSet) -> ModelConfig:
    V, d = params["embed.W"].shape
    h, L = params["out.W"].shape
    return ModelConfig(V, d, h, L)


def bag_matrix(token_seqs: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Row ``i`` holds token frequencies of sequence ``i`` divided by its length.

    ``bag @ embed.W`` is then exactly the mean-pooled embedding.
    """
    bag = np.zeros((len(token_seqs), vocab_size))
    for i, toks in enumerate(token_seqs):
        if len(toks) == 0:
            raise EmptyInput(f"sequence {i} is empty")
        arr = np.asarray(toks, dtype=np.int64)
        if arr.min() < 0 or arr.max() >= vocab_size:
            raise TokenOutOfRange(f"sequence {i} has ids outside [0, {vocab_size})")
        np.add.at(bag[i], arr, 1.0)
        bag[i] /= len(arr)
    return bag


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_bag(params: ParamSet, bag: np.ndarray):
    pooled = bag @ params["embed.W"]
    act = np.tanh(pooled @ params["hidden.W"] + params["hidden.b"])
    logits = act @ params["out.W"] + params["out.b"]
    return pooled, act, logits


def hidden_activations(params: ParamSet, token_seqs: Sequence[Sequence[int]]) -> np.ndarray:
    bag = bag_matrix(token_seqs, params["embed.W"].shape[0])
    return _forward_bag(params, bag)[1]


def forward_batch(params: ParamSet, token_seqs: Sequence[Sequence[int]]) -> np.ndarray:
    bag = bag_matrix(token_seqs, params["embed.W"].shape[0])
    return _softmax(_forward_bag(params, bag)[2])


def forward(params: ParamSet, tokens: Sequence[int]) -> np.ndarray:
    return forward_batch(params, [tokens])[0]


def predict_batch(params: ParamSet, token_seqs: Sequence[Sequence[int]]) -> np.ndarray:
    # np.argmax returns the first maximal index: ties go to the lowest label
    return np.argmax(forward_batch(params, token_seqs), axis=1)


def predict(params: ParamSet, tokens: Sequence[int]) -> int:
    return int(predict_batch(params, [tokens])[0])


def loss_and_grad(params: ParamSet, batch) -> tuple[float, ParamSet]:
    """Mean cross-entropy over ``batch`` of ``(tokens, label)`` and its exact gradient."""
    if len(batch) == 0:
        raise EmptyInput("empty batch")
    token_seqs = [b[0] for b in batch]
    labels = np.asarray([b[1] for b in batch], dtype=np.int64)
    bag = bag_matrix(token_seqs, params["embed.W"].shape[0])
    return _loss_and_grad_bag(params, bag, labels)


def _loss_and_grad_bag(params: ParamSet, bag: np.ndarray, labels: np.ndarray):
    L = params["out.b"].shape[0]
    if labels.min() < 0 or labels.max() >= L:
        raise ConfigError(f"labels must lie in [0, {L})")
    n = bag.shape[0]
    pooled, act, logits = _forward_bag(params, bag)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))

    d_logits = np.exp(shifted - log_z[:, None])
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    d_act = d_logits @ params["out.W"].T
    d_pre = d_act * (1.0 - act * act)
    d_pooled = d_pre @ params["hidden.W"].T
    grad = ParamSet({
        "embed.W": bag.T @ d_pooled,
        "hidden.W": pooled.T @ d_pre,
        "hidden.b": d_pre.sum(axis=0),
        "out.W": act.T @ d_logits,
        "out.b": d_logits.sum(axis=0),
    })
    return loss, grad


def train(init: ParamSet, data, cfg: TrainConfig, history: list | None = None) -> ParamSet:
    """Plain minibatch SGD for ``cfg.epochs`` epochs, reshuffled each epoch.

    ``data`` is a Dataset (or any sequence of samples with ``tokens`` and
    ``label``). If ``history`` is given, the mean training loss of each
    epoch is appended to it.
    """
    samples = list(data)
    if not samples:
        raise EmptyInput("cannot train on an empty dataset")
    bag = bag_matrix([s.tokens for s in samples], init["embed.W"].shape[0])
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    n = len(samples)
    names = list(init)
    weights = {k: np.array(init[k]) for k in names}
    rng = make_rng(cfg.seed)
    lr = cfg.learning_rate

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grad = _loss_and_grad_bag(ParamSet(weights, check_finite=False), bag[idx], labels[idx])
            total += loss * len(idx)
            if lr != 0.0:
                for k in names:
                    weights[k] -= lr * grad[k]
        if history is not None:
            history.append(total / n)
    if lr == 0.0:
        return init
    return ParamSet(weights)
