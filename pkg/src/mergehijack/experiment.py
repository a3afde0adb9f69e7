"""Seeded end-to-end experiments, parameter sweeps and report consolidation.

Seed hierarchy (all below ``cfg.seed`` via :func:`derive_seed`)::

    init                      base model initialisation
    pretrain/data, pretrain/labels, pretrain/train
    data                      every task's train/test split and the shadow set
    finetune/<i>              shuffle seed of clean upload i (the surrogate's
                              seed is reused for all attack trainings)
    attack                    poisoning positions and sparsification draws
    merge                     DARE/DELLA drop masks
    eval                      trigger positions at evaluation time
    defense/<name>            defense-specific randomness

Output layout under ``output_dir``: ``datasets/``, ``checkpoints/``,
``reports/`` and ``trace/``.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .defense import DefenseConfig, ParaphrasedModel, SuspicionFilter, fine_prune_stages
from .errors import ConfigError, SchemaError
from .evaluate import MetricsReport, accuracy, attack_success_rate, config_hash, metrics_report
from .hijack import AttackConfig, UploadArtifacts, build_upload_model
from .merge import MergeSpec, merge
from .seeding import derive_seed, make_rng
from .synth_data import Dataset, TaskSpec, TriggerSpec, gen_shadow, gen_task, save_jsonl
from .tensor_store import ParamSet, TaskVector, cosine_similarity, save_checkpoint, task_vector
from .toy_model import ModelConfig, TrainConfig, init_model, train

log = logging.getLogger(__name__)


@dataclass
class TrainSection:
    learning_rate: float = 0.1
    epochs: int = 4
    batch_size: int = 16


@dataclass
class PretrainSection:
    per_task_n: int = 200
    epochs: int = 3
    learning_rate: float = 0.05
    batch_size: int = 16
    label_noise: float = 0.0


@dataclass
class AttackSection:
    enabled: bool = True
    delta: float = 0.7
    epsilon: float = 0.2
    lam: float = 2.0
    rho: float = 0.2
    shadow_per_task_n: int = 125
    # shadow finetuning is the attacker's own; None falls back to the train section
    shadow_learning_rate: float | None = 1.5
    shadow_batch_size: int | None = 8


@dataclass
class MergeSection:
    algorithm: str = "ta"
    ratios: list | None = None
    mb_top_frac: float = 0.01
    mb_bottom_frac: float = 0.20
    dare_drop_rate: float = 0.2
    della_delta: float = 0.8
    della_epsilon: float = 0.1


@dataclass
class DefenseSection:
    prune_ratio: float = 0.2
    calib_n: int = 100
    # a light clean pass; at the uploaders' lr 0.1 it also scrubs the toy backdoor
    finetune_epochs: int = 4
    finetune_lr: float = 0.01
    alpha: float = 20.0
    q_remove: float = 0.6
    q_noise: float = 0.1


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_tasks: int = 3
    n_shadow: int = 4
    surrogate_index: int = 0
    labels_per_task: int = 2
    pool_size: int = 3
    seq_len: int = 2
    noise_rate: float = 0.1
    trigger_len: int = 6
    vocab_size: int = 64
    min_noise_tokens: int = 8
    embed_dim: int = 16
    hidden_dim: int = 32
    n_train: int = 500
    n_test: int = 500
    train: TrainSection = field(default_factory=TrainSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    merge: MergeSection = field(default_factory=MergeSection)
    defense: DefenseSection | None = field(default_factory=DefenseSection)
    output_dir: str | None = None

    def validate(self) -> None:
        if self.n_tasks < 2:
            raise ConfigError("need at least two merged tasks")
        if self.n_shadow < 1:
            raise ConfigError("need at least one shadow task")
        if not 0 <= self.surrogate_index < self.n_tasks:
            raise ConfigError("surrogate_index out of range")
        if self.labels_per_task < 2 or self.pool_size < 1 or self.trigger_len < 1:
            raise ConfigError("invalid task layout")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("dataset sizes must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        return _from_dict(cls, obj)


_SECTIONS = {
    "train": TrainSection,
    "pretrain": PretrainSection,
    "attack": AttackSection,
    "merge": MergeSection,
    "defense": DefenseSection,
}


def _from_dict(cls, obj: dict):
    if not isinstance(obj, dict):
        raise ConfigError(f"expected an object for {cls.__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in obj.items():
        if cls is ExperimentConfig and key in _SECTIONS:
            kwargs[key] = None if value is None else _from_dict(_SECTIONS[key], value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(obj)


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def with_override(cfg: ExperimentConfig, path: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with the dotted ``path`` (e.g. ``attack.lam``) set to ``value``."""
    out = copy.deepcopy(cfg)
    parts = path.split(".")
    target = out
    for part in parts[:-1]:
        if not hasattr(target, part) or getattr(target, part) is None:
            raise ConfigError(f"unresolvable config path {path!r}")
        target = getattr(target, part)
    if not dataclasses.is_dataclass(target) or parts[-1] not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unresolvable config path {path!r}")
    if isinstance(value, str):
        value = _parse_scalar(value)
    setattr(target, parts[-1], value)
    return out


@dataclass(frozen=True)
class World:
    """Vocabulary layout and task definitions derived from a config."""

    model: ModelConfig
    tasks: tuple[TaskSpec, ...]
    shadow: tuple[TaskSpec, ...]
    reference: TaskSpec
    trigger: TriggerSpec

    @property
    def surrogate(self) -> TaskSpec:
        return self.tasks[0]


def build_world(cfg: ExperimentConfig) -> World:
    """Carve the vocabulary into disjoint pools, a noise band and a trigger band.

    Every task (merged, shadow and the clean reference task) gets its own
    labels and pools, and all of them share the one noise band. Merged tasks
    are listed with the surrogate first.
    """
    cfg.validate()
    n_groups = cfg.n_tasks + cfg.n_shadow + 1
    pool_tokens = n_groups * cfg.labels_per_task * cfg.pool_size
    vocab = max(cfg.vocab_size, pool_tokens + cfg.min_noise_tokens + cfg.trigger_len)
    n_labels = n_groups * cfg.labels_per_task + 1
    band = tuple(range(vocab - cfg.trigger_len, vocab))

    next_token, next_label = 0, 0

    def make(name, task_seed):
        nonlocal next_token, next_label
        pools = {}
        for _ in range(cfg.labels_per_task):
            pools[next_label] = tuple(range(next_token, next_token + cfg.pool_size))
            next_label += 1
            next_token += cfg.pool_size
        own = {t for pool in pools.values() for t in pool}
        # noise never uses any task's pool, so samples of distinct tasks cannot coincide
        reserved = band + tuple(t for t in range(pool_tokens) if t not in own)
        return TaskSpec(name, task_seed, pools, vocab, cfg.noise_rate, cfg.seq_len, reserved)

    merged = [make(f"task{i}", i) for i in range(cfg.n_tasks)]
    shadow = tuple(make(f"shadow{j}", 1000 + j) for j in range(cfg.n_shadow))
    reference = make("reference", 2000)
    order = [cfg.surrogate_index] + [i for i in range(cfg.n_tasks) if i != cfg.surrogate_index]
    model = ModelConfig(vocab, cfg.embed_dim, cfg.hidden_dim, n_labels)
    trigger = TriggerSpec(band, model.target_label)
    return World(model, tuple(merged[i] for i in order), shadow, reference, trigger)


def _train_cfg(sec, seed: int) -> TrainConfig:
    return TrainConfig(sec.learning_rate, sec.epochs, sec.batch_size, seed)


def pretrain_base(cfg: ExperimentConfig, world: World) -> ParamSet:
    """Generic "pre-training" on a mixture over the merged tasks' pools (labels optionally flipped)."""
    root = cfg.seed
    init = init_model(world.model, derive_seed(root, "init"))
    mix = Dataset((), "train")
    for spec in world.tasks:
        mix = mix + gen_task(spec, cfg.pretrain.per_task_n, 1, derive_seed(root, "pretrain", "data"))[0]
    rng = make_rng(derive_seed(root, "pretrain", "labels"))
    samples = []
    for s in mix:
        if rng.random() < cfg.pretrain.label_noise:
            spec = next(t for t in world.tasks if t.name == s.task_id)
            others = [c for c in spec.clean_labels if c != s.label]
            s = dataclasses.replace(s, label=int(rng.choice(others)))
        samples.append(s)
    return train(init, Dataset(tuple(samples)), _train_cfg(cfg.pretrain, derive_seed(root, "pretrain", "train")))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    world: World
    base: ParamSet
    clean_uploads: dict[str, ParamSet]
    malicious_upload: ParamSet
    reference_model: ParamSet
    train_sets: dict[str, Dataset]
    test_sets: dict[str, Dataset]
    shadow: Dataset
    report: MetricsReport
    artifacts: UploadArtifacts | None = None
    defense_report: dict | None = None
    reference_train: Dataset | None = None

    @property
    def surrogate_id(self) -> str:
        return self.world.surrogate.name

    @property
    def other_uploads(self) -> list[ParamSet]:
        return [self.clean_uploads[t] for t in self.test_sets if t != self.surrogate_id]

    def merge_spec(self) -> MergeSpec:
        return merge_spec_of(self.config)

    def merged(self, malicious: bool = True) -> ParamSet:
        first = self.malicious_upload if malicious else self.clean_uploads[self.surrogate_id]
        return merge(self.base, [first, *self.other_uploads], self.merge_spec())


def merge_spec_of(cfg: ExperimentConfig) -> MergeSpec:
    m = cfg.merge
    return MergeSpec(
        algorithm=m.algorithm,
        ratios=None if m.ratios is None else tuple(m.ratios),
        mb_top_frac=m.mb_top_frac,
        mb_bottom_frac=m.mb_bottom_frac,
        dare_drop_rate=m.dare_drop_rate,
        della_delta=m.della_delta,
        della_epsilon=m.della_epsilon,
        seed=derive_seed(cfg.seed, "merge"),
    )


def attack_config_of(cfg: ExperimentConfig, world: World) -> AttackConfig:
    a = cfg.attack
    train_cfg = _train_cfg(cfg.train, derive_seed(cfg.seed, "finetune", 0))
    return AttackConfig(
        shadow_specs=world.shadow,
        surrogate_spec=world.surrogate,
        trigger=world.trigger,
        train_cfg=train_cfg,
        shadow_train_cfg=dataclasses.replace(
            train_cfg,
            learning_rate=train_cfg.learning_rate if a.shadow_learning_rate is None else a.shadow_learning_rate,
            batch_size=train_cfg.batch_size if a.shadow_batch_size is None else a.shadow_batch_size,
        ),
        delta=a.delta,
        epsilon=a.epsilon,
        lam=a.lam,
        rho=a.rho,
        shadow_per_task_n=a.shadow_per_task_n,
    )


@dataclass
class TaskData:
    train: dict[str, Dataset]
    test: dict[str, Dataset]
    reference_train: Dataset
    shadow: Dataset


def make_datasets(cfg: ExperimentConfig, world: World) -> TaskData:
    data_seed = derive_seed(cfg.seed, "data")
    train_sets, test_sets = {}, {}
    for spec in world.tasks:
        train_sets[spec.name], test_sets[spec.name] = gen_task(spec, cfg.n_train, cfg.n_test, data_seed)
    ref_train, _ = gen_task(world.reference, cfg.n_train, 1, data_seed)
    shadow = gen_shadow(world.shadow, cfg.attack.shadow_per_task_n, data_seed)
    return TaskData(train_sets, test_sets, ref_train, shadow)


def train_models(cfg: ExperimentConfig, world: World, data: TaskData):
    """Returns ``(base, clean_uploads, reference_model)``."""
    root = cfg.seed
    base = pretrain_base(cfg, world)
    clean_uploads = {
        spec.name: train(base, data.train[spec.name], _train_cfg(cfg.train, derive_seed(root, "finetune", i)))
        for i, spec in enumerate(world.tasks)
    }
    reference = train(base, data.reference_train, _train_cfg(cfg.train, derive_seed(root, "finetune", "reference")))
    return base, clean_uploads, reference


def attack_upload(cfg: ExperimentConfig, world: World, base: ParamSet, data: TaskData):
    """Returns ``(malicious_upload, artifacts)``."""
    return build_upload_model(
        base, attack_config_of(cfg, world), derive_seed(cfg.seed, "attack"),
        surrogate=data.train[world.surrogate.name], shadow=data.shadow,
    )


def evaluate_models(
    cfg: ExperimentConfig,
    world: World,
    base: ParamSet,
    clean_uploads: dict[str, ParamSet],
    malicious: ParamSet,
    test_sets: dict[str, Dataset],
    tau_sparse: TaskVector | None = None,
    trace_summary: dict | None = None,
) -> MetricsReport:
    meta = {
        "config_hash": config_hash({k: v for k, v in cfg.to_dict().items() if k != "output_dir"}),
        "seed": cfg.seed,
        "attack_enabled": cfg.attack.enabled,
        "n_tasks": cfg.n_tasks,
    }
    if trace_summary is not None:
        meta["trace"] = dict(trace_summary)
    if tau_sparse is not None:
        meta["orthogonality"] = orthogonality(tau_sparse, base, clean_uploads)
    ordered = {t.name: test_sets[t.name] for t in world.tasks}
    return metrics_report(
        base,
        [clean_uploads[t.name] for t in world.tasks[1:]],
        malicious,
        clean_uploads[world.surrogate.name],
        merge_spec_of(cfg),
        ordered,
        world.trigger,
        seed=derive_seed(cfg.seed, "eval"),
        meta=meta,
    )


def run_pipeline(cfg: ExperimentConfig) -> ExperimentResult:
    """Everything in memory; no files are written."""
    world = build_world(cfg)
    data = make_datasets(cfg, world)
    base, clean_uploads, reference_model = train_models(cfg, world, data)

    artifacts = None
    if cfg.attack.enabled:
        malicious, artifacts = attack_upload(cfg, world, base, data)
    else:
        malicious = clean_uploads[world.surrogate.name]

    report = evaluate_models(
        cfg, world, base, clean_uploads, malicious, data.test,
        tau_sparse=None if artifacts is None else artifacts.tau_sparse,
        trace_summary=None if artifacts is None else artifacts.trace.summary(),
    )
    result = ExperimentResult(
        cfg, world, base, clean_uploads, malicious, reference_model,
        data.train, data.test, data.shadow, report, artifacts,
        reference_train=data.reference_train,
    )
    if cfg.defense is not None and cfg.attack.enabled:
        result.defense_report = evaluate_defenses(result)
    return result


def orthogonality(tau_sparse: TaskVector, base: ParamSet, uploads: dict[str, ParamSet]) -> dict:
    """|cos(tau', task vector)| per merged task; a diagnostic only."""
    out = {}
    for name, model in uploads.items():
        try:
            out[name] = abs(cosine_similarity(tau_sparse, task_vector(model, base)))
        except Exception:  # zero vectors (e.g. tau == 0 at rho = 0)
            out[name] = None
    return out


def calibration_set(cfg: ExperimentConfig, world: World, n: int) -> Dataset:
    """``n`` clean held-out samples per merged task (disjoint from the test sets)."""
    seed = derive_seed(cfg.seed, "defense", "calib")
    out = Dataset((), "train")
    for spec in world.tasks:
        out = out + gen_task(spec, n, 1, seed)[0]
    return out


DEFENSES = ("fine-prune", "cleangen", "paraphrase")


def defended_models(cfg: ExperimentConfig, world: World, merged: ParamSet, reference: ParamSet,
                    methods: Sequence[str] = DEFENSES) -> dict[str, Any]:
    """Predictors for each requested defense wrapped around ``merged``.

    ``fine-prune`` contributes two entries: the finetuned model before
    pruning (``fine_prune_ft``) and the pruned one (``fine_prune``).
    """
    d = cfg.defense or DefenseSection()
    root = cfg.seed
    out: dict[str, Any] = {}
    for method in methods:
        if method == "fine-prune":
            fp_cfg = DefenseConfig(
                method="fine_prune",
                prune_ratio=d.prune_ratio,
                calib_n=d.calib_n,
                train_cfg=TrainConfig(d.finetune_lr, d.finetune_epochs, cfg.train.batch_size,
                                      derive_seed(root, "defense", "finetune")),
            )
            fp = fine_prune_stages(merged, calibration_set(cfg, world, d.calib_n), fp_cfg)
            out["fine_prune_ft"] = fp.finetuned
            out["fine_prune"] = fp.pruned
            out["fine_prune_units"] = list(fp.pruned_units)
        elif method == "cleangen":
            out["suspicion_filter"] = SuspicionFilter(merged, reference, d.alpha)
        elif method == "paraphrase":
            pools = tuple(pool for spec in world.tasks for pool in spec.pool_map.values())
            out["paraphrase_sim"] = ParaphrasedModel(
                merged, world.trigger.band, pools, d.q_remove, d.q_noise,
                derive_seed(root, "defense", "paraphrase"),
            )
        else:
            raise ConfigError(f"unknown defense {method!r}; expected one of {DEFENSES}")
    return out


def defense_report(cfg: ExperimentConfig, world: World, merged: ParamSet, reference: ParamSet,
                   test_sets: dict[str, Dataset], methods: Sequence[str] = DEFENSES) -> dict:
    """Per-task BP and ASR for the undefended merged model and each defense."""
    eval_seed = derive_seed(cfg.seed, "eval")
    models = {"none": merged, **defended_models(cfg, world, merged, reference, methods)}
    out: dict[str, Any] = {}
    for name, model in models.items():
        if name == "fine_prune_units":
            out[name] = model
            continue
        out[name] = {
            tid: {
                "bp": accuracy(model, test),
                "asr": attack_success_rate(model, test, world.trigger, eval_seed),
            }
            for tid, test in test_sets.items()
        }
    return out


def evaluate_defenses(result: ExperimentResult) -> dict:
    return defense_report(result.config, result.world, result.merged(malicious=True),
                          result.reference_model, result.test_sets)


def write_outputs(result: ExperimentResult, out_dir) -> None:
    dirs = {k: os.path.join(out_dir, k) for k in ("datasets", "checkpoints", "reports", "trace")}
    for path in dirs.values():
        os.makedirs(path, exist_ok=True)
    for tid in result.test_sets:
        save_jsonl(result.train_sets[tid], os.path.join(dirs["datasets"], f"{tid}.train.jsonl"))
        save_jsonl(result.test_sets[tid], os.path.join(dirs["datasets"], f"{tid}.test.jsonl"))
    if result.reference_train is not None:
        save_jsonl(result.reference_train, os.path.join(dirs["datasets"], "reference.train.jsonl"))
    save_jsonl(result.shadow, os.path.join(dirs["datasets"], "shadow.jsonl"))

    ck = dirs["checkpoints"]
    save_checkpoint(result.base, os.path.join(ck, "base.mhj"))
    for tid, model in result.clean_uploads.items():
        save_checkpoint(model, os.path.join(ck, f"upload_{tid}.mhj"))
    save_checkpoint(result.reference_model, os.path.join(ck, "reference.mhj"))
    save_checkpoint(result.malicious_upload, os.path.join(ck, "malicious_upload.mhj"))
    save_checkpoint(result.merged(malicious=False), os.path.join(ck, "merged_clean.mhj"))
    save_checkpoint(result.merged(malicious=True), os.path.join(ck, "merged_malicious.mhj"))
    if result.artifacts is not None:
        result.artifacts.save(dirs["trace"])

    with open(os.path.join(dirs["reports"], "report.json"), "w", encoding="utf-8") as fh:
        fh.write(result.report.to_json())
    with open(os.path.join(dirs["reports"], "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.report.to_csv())
    if result.defense_report is not None:
        with open(os.path.join(dirs["reports"], "defense.json"), "w", encoding="utf-8") as fh:
            json.dump(result.defense_report, fh, indent=2)
            fh.write("\n")
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(result.config.to_dict(), fh, indent=2)
        fh.write("\n")


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run the full pipeline; if ``cfg.output_dir`` is set, write all artifacts there.

    A failed run removes whatever it had written.
    """
    result = run_pipeline(cfg)
    if cfg.output_dir:
        existed = os.path.exists(cfg.output_dir)
        try:
            write_outputs(result, cfg.output_dir)
        except BaseException:
            if not existed:
                shutil.rmtree(cfg.output_dir, ignore_errors=True)
            raise
    return result


@dataclass(frozen=True)
class SweepSpec:
    path: str
    values: tuple
    repetitions: int = 1

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")


SWEEP_FIELDS = ("param", "value", "rep", "seed", "task", "is_surrogate", "cp", "bp", "asr", "cp_v", "asr_v", "bp_v")


def sweep(cfg: ExperimentConfig, spec: SweepSpec) -> tuple[str, list[ExperimentResult]]:
    """One run per value x repetition; returns CSV text (one row per run and task)."""
    with_override(cfg, spec.path, spec.values[0])  # fail fast on bad paths
    rows, results = [], []
    for value in spec.values:
        for rep in range(spec.repetitions):
            run_cfg = with_override(cfg, spec.path, value)
            run_cfg.seed = cfg.seed if spec.repetitions == 1 else derive_seed(cfg.seed, "sweep-rep", rep)
            if cfg.output_dir:
                run_cfg.output_dir = os.path.join(cfg.output_dir, f"{spec.path}={value}", f"rep{rep}")
            run_cfg.defense = None
            res = run_experiment(run_cfg)
            results.append(res)
            shown = value if isinstance(value, str) else json.dumps(value)
            for tid, m in res.report.tasks.items():
                rows.append({
                    "param": spec.path, "value": shown, "rep": rep, "seed": run_cfg.seed,
                    "task": tid, "is_surrogate": int(tid == res.surrogate_id),
                    "cp": m.cp, "bp": m.bp, "asr": m.asr, "cp_v": res.report.cp_v[tid],
                    "asr_v": res.report.asr_v, "bp_v": res.report.bp_v,
                })
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue(), results


REPORT_FIELDS = ("run", "status", "task", "cp", "bp", "asr", "cp_v", "asr_v", "bp_v")


def consolidate_reports(run_dirs: Sequence[str]) -> str:
    """Stable-ordered CSV over run directories; missing reports get a ``missing`` row."""
    rows = []
    for run in sorted(run_dirs):
        path = os.path.join(run, "reports", "report.json")
        if not os.path.exists(path):
            rows.append({"run": run, "status": "missing"})
            continue
        try:
            with open(path, encoding="utf-8") as fh:
                rep = MetricsReport.from_dict(json.load(fh))
        except (json.JSONDecodeError, SchemaError) as exc:
            raise SchemaError(f"{path}: {exc}") from exc
        for tid, m in rep.tasks.items():
            rows.append({
                "run": run, "status": "ok", "task": tid, "cp": m.cp, "bp": m.bp, "asr": m.asr,
                "cp_v": rep.cp_v[tid], "asr_v": rep.asr_v, "bp_v": rep.bp_v,
            })
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n", restval="")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def summary_table(result: ExperimentResult) -> str:
    lines = [f"{'task':<12}{'CP':>8}{'BP':>8}{'ASR':>8}{'CP-V':>8}"]
    for tid, m in result.report.tasks.items():
        lines.append(f"{tid:<12}{m.cp:8.3f}{m.bp:8.3f}{m.asr:8.3f}{result.report.cp_v[tid]:8.3f}")
    lines.append(f"ASR-V {result.report.asr_v:+.3f}   BP-V {result.report.bp_v:+.3f}")
    return "\n".join(lines)
