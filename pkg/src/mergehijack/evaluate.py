"""ASR / CP / BP metrics and their merged-vs-upload variants.

Every metric takes a *model*: either a :class:`ParamSet` or any object with a
``predict_batch(token_seqs) -> labels`` method. Defenses plug in through the
latter, so metric code never changes when a defense is active.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import SchemaError
from .merge import MergeSpec, merge
from .seeding import derive_seed
from .synth_data import Dataset, TriggerSpec, insert_trigger
from .tensor_store import ParamSet
from .toy_model import predict_batch

SCHEMA_VERSION = 1


def predictions(model, token_seqs) -> np.ndarray:
    if isinstance(model, ParamSet):
        return predict_batch(model, token_seqs)
    return np.asarray(model.predict_batch(token_seqs), dtype=np.int64)


def accuracy(model, test: Dataset) -> float:
    pred = predictions(model, test.token_seqs)
    return float(np.mean(pred == test.labels))


def triggered(test: Dataset, trigger: TriggerSpec, seed: int) -> Dataset:
    """The test set with the trigger inserted into every sample (labels untouched)."""
    return Dataset(
        tuple(insert_trigger(s, trigger, derive_seed(seed, "asr-pos", i)) for i, s in enumerate(test)),
        test.split,
    )


def attack_success_rate(model, test: Dataset, trigger: TriggerSpec, seed: int) -> float:
    pred = predictions(model, triggered(test, trigger, seed).token_seqs)
    return float(np.mean(pred == trigger.target_label))


@dataclass
class TaskMetrics:
    cp: float
    bp: float
    asr: float


@dataclass
class MetricsReport:
    tasks: dict[str, TaskMetrics]
    asr_v: float
    bp_v: float
    cp_v: dict[str, float]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "tasks": {k: {"cp": v.cp, "bp": v.bp, "asr": v.asr} for k, v in self.tasks.items()},
            "asr_v": self.asr_v,
            "bp_v": self.bp_v,
            "cp_v": dict(self.cp_v),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, obj: Mapping) -> "MetricsReport":
        if not isinstance(obj, Mapping) or obj.get("schema") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported report schema {obj.get('schema') if isinstance(obj, Mapping) else obj!r}")
        try:
            tasks = {k: TaskMetrics(float(v["cp"]), float(v["bp"]), float(v["asr"])) for k, v in obj["tasks"].items()}
            return cls(tasks, float(obj["asr_v"]), float(obj["bp_v"]),
                       {k: float(v) for k, v in obj["cp_v"].items()}, dict(obj.get("meta", {})))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise SchemaError(f"malformed report: {exc}") from exc

    def csv_rows(self) -> list[dict]:
        return [
            {"task": k, "cp": v.cp, "bp": v.bp, "asr": v.asr, "cp_v": self.cp_v[k],
             "asr_v": self.asr_v, "bp_v": self.bp_v}
            for k, v in self.tasks.items()
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.csv_rows()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def metrics_report(
    base: ParamSet,
    clean_uploads: Sequence[ParamSet],
    malicious_upload: ParamSet,
    clean_surrogate_model: ParamSet,
    merge_spec: MergeSpec,
    test_sets: Mapping[str, Dataset],
    trigger: TriggerSpec,
    *,
    seed: int = 0,
    meta: Mapping | None = None,
) -> MetricsReport:
    """Paired clean-vs-malicious merge evaluation.

    ``test_sets`` is ordered: the first entry is the surrogate task and the
    rest align with ``clean_uploads``. Both merges use the same spec (and
    therefore the same drop seeds), so swapping in the clean surrogate model
    for the malicious one yields identical merged models.
    """
    task_ids = list(test_sets)
    if len(task_ids) != len(clean_uploads) + 1:
        raise SchemaError(f"{len(task_ids)} test sets for {len(clean_uploads) + 1} uploads")
    clean_merged = merge(base, [clean_surrogate_model, *clean_uploads], merge_spec)
    bad_merged = merge(base, [malicious_upload, *clean_uploads], merge_spec)
    per_task_clean = [clean_surrogate_model, *clean_uploads]

    tasks, cp_v = {}, {}
    for i, tid in enumerate(task_ids):
        test = test_sets[tid]
        cp = accuracy(clean_merged, test)
        tasks[tid] = TaskMetrics(
            cp=cp,
            bp=accuracy(bad_merged, test),
            asr=attack_success_rate(bad_merged, test, trigger, seed),
        )
        cp_v[tid] = cp - accuracy(per_task_clean[i], test)

    sur_test = test_sets[task_ids[0]]
    asr_v = tasks[task_ids[0]].asr - attack_success_rate(malicious_upload, sur_test, trigger, seed)
    bp_v = tasks[task_ids[0]].bp - accuracy(malicious_upload, sur_test)
    info = {
        "algorithm": merge_spec.algorithm,
        "ratios": list(merge_spec.ratios_for(len(task_ids))),
        "merge_seed": merge_spec.seed,
        "eval_seed": seed,
        "surrogate_task": task_ids[0],
    }
    info.update(meta or {})
    return MetricsReport(tasks, asr_v, bp_v, cp_v, info)

