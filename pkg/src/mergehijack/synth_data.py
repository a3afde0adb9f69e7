"""Synthetic token-classification tasks, shadow sets, triggers and poisoning.

A task owns one pool of indicative tokens per clean label. A sample of label
``c`` is ``seq_len`` tokens, each drawn from pool ``c`` or, with probability
``noise_rate``, uniformly from the task's noise band (every id that is
neither reserved for triggers nor in one of the task's own pools). Labels are
emitted round-robin, so histograms are balanced to within one sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, SchemaError
from .seeding import derive_seed, make_rng


@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    label: int
    task_id: str
    poisoned: bool = False

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "label": self.label,
            "task": self.task_id,
            "poisoned": self.poisoned,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Sample":
        try:
            return cls(
                tokens=tuple(int(t) for t in obj["tokens"]),
                label=int(obj["label"]),
                task_id=str(obj["task"]),
                poisoned=bool(obj["poisoned"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed sample record: {obj!r}") from exc


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split not in ("train", "test"):
            raise ConfigError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.samples + other.samples, self.split)

    @property
    def token_seqs(self) -> list[tuple[int, ...]]:
        return [s.tokens for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([s.label for s in self.samples], dtype=np.int64)

    def by_task(self, task_id: str) -> "Dataset":
        return Dataset(tuple(s for s in self.samples if s.task_id == task_id), self.split)

    def take(self, n: int) -> "Dataset":
        return Dataset(self.samples[:n], self.split)


def save_jsonl(data: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in data:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def load_jsonl(path, split: str = "train") -> Dataset:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            samples.append(Sample.from_json(obj))
    return Dataset(tuple(samples), split)


@dataclass(frozen=True)
class TriggerSpec:
    trigger_tokens: tuple[int, ...]
    target_label: int

    def __post_init__(self):
        object.__setattr__(self, "trigger_tokens", tuple(int(t) for t in self.trigger_tokens))
        if not self.trigger_tokens:
            raise ConfigError("trigger must contain at least one token")

    @property
    def band(self) -> frozenset[int]:
        return frozenset(self.trigger_tokens)


@dataclass(frozen=True)
class TaskSpec:
    """One synthetic task. ``pool_map`` maps each clean label to its token pool.

    ``reserved`` ids are never emitted as noise (the trigger band and, inside
    a shared world, the pools of every other task).
    """

    name: str
    task_seed: int
    pool_map: Mapping[int, tuple[int, ...]]
    vocab_size: int
    noise_rate: float = 0.2
    seq_len: int = 8
    reserved: tuple[int, ...] = field(default=())

    def __post_init__(self):
        pools = {int(k): tuple(int(t) for t in v) for k, v in sorted(self.pool_map.items())}
        object.__setattr__(self, "pool_map", pools)
        object.__setattr__(self, "reserved", tuple(sorted(int(t) for t in self.reserved)))
        if len(pools) < 2:
            raise ConfigError(f"task {self.name!r} needs at least two clean labels")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be positive")
        seen: set[int] = set()
        for label, pool in pools.items():
            if not pool:
                raise ConfigError(f"empty pool for label {label} in {self.name!r}")
            if seen & set(pool):
                raise ConfigError(f"pools overlap in task {self.name!r}")
            seen |= set(pool)
        if seen & set(self.reserved):
            raise ConfigError(f"pools of {self.name!r} overlap its reserved tokens")
        if min(seen) < 0 or max(seen | set(self.reserved)) >= self.vocab_size:
            raise ConfigError(f"token ids of {self.name!r} exceed vocab_size")

    @property
    def clean_labels(self) -> tuple[int, ...]:
        return tuple(self.pool_map)

    @property
    def all_pool_tokens(self) -> frozenset[int]:
        return frozenset(t for pool in self.pool_map.values() for t in pool)

    def noise_band(self) -> np.ndarray:
        excluded = self.all_pool_tokens | set(self.reserved)
        return np.asarray([t for t in range(self.vocab_size) if t not in excluded], dtype=np.int64)


def _gen_split(spec: TaskSpec, n: int, seed: int, split: str) -> Dataset:
    rng = make_rng(derive_seed(seed, "task", spec.task_seed, split))
    labels = spec.clean_labels
    noise = spec.noise_band()
    if spec.noise_rate > 0 and noise.size == 0:
        raise ConfigError(f"task {spec.name!r} has no noise tokens available")
    samples = []
    for i in range(n):
        label = labels[i % len(labels)]
        pool = np.asarray(spec.pool_map[label], dtype=np.int64)
        toks = rng.choice(pool, size=spec.seq_len)
        if spec.noise_rate > 0:
            is_noise = rng.random(spec.seq_len) < spec.noise_rate
            # keep at least one indicative token so the label stays identifiable
            is_noise[rng.integers(spec.seq_len)] = False
            toks = np.where(is_noise, rng.choice(noise, size=spec.seq_len), toks)
        samples.append(Sample(tuple(int(t) for t in toks), int(label), spec.name))
    return Dataset(tuple(samples), split)


def gen_task(spec: TaskSpec, n_train: int = 500, n_test: int = 500, seed: int = 0) -> tuple[Dataset, Dataset]:
    return _gen_split(spec, n_train, seed, "train"), _gen_split(spec, n_test, seed, "test")


def gen_shadow(specs: Sequence[TaskSpec], per_task_n: int = 125, seed: int = 0) -> Dataset:
    if not specs:
        raise ConfigError("shadow set needs at least one task")
    out = Dataset((), "train")
    for spec in specs:
        out = out + _gen_split(spec, per_task_n, seed, "train")
    return out


def insert_trigger(s: Sample, t: TriggerSpec, seed: int) -> Sample:
    pos = int(make_rng(seed).integers(0, len(s.tokens) + 1))
    toks = s.tokens[:pos] + t.trigger_tokens + s.tokens[pos:]
    return replace(s, tokens=toks)


def round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def poison(d: Dataset, t: TriggerSpec, rho: float, seed: int) -> Dataset:
    """Trigger and relabel exactly ``round(rho * len(d))`` uniformly chosen samples."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"poisoning ratio must be in [0, 1], got {rho}")
    n = len(d)
    k = round_half_away(rho * n)
    if k == 0:
        return d
    rng = make_rng(derive_seed(seed, "poison-select"))
    chosen = rng.choice(n, size=k, replace=False)
    samples = list(d.samples)
    for idx in sorted(int(i) for i in chosen):
        s = insert_trigger(samples[idx], t, derive_seed(seed, "poison-pos", idx))
        samples[idx] = replace(s, label=t.target_label, poisoned=True)
    return Dataset(tuple(samples), d.split)


def contains_subsequence(tokens: Sequence[int], sub: Sequence[int]) -> bool:
    m = len(sub)
    return any(tuple(tokens[i:i + m]) == tuple(sub) for i in range(len(tokens) - m + 1))


def pool_lookup_label(spec: TaskSpec, tokens: Iterable[int]) -> int:
    """Majority-pool label; the reference classifier for generator tests."""
    counts = {label: 0 for label in spec.clean_labels}
    owner = {t: label for label, pool in spec.pool_map.items() for t in pool}
    for tok in tokens:
        if tok in owner:
            counts[owner[tok]] += 1
    return max(counts, key=lambda lbl: (counts[lbl], -lbl))
