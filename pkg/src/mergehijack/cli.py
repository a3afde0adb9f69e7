"""Command-line driver.

Every subcommand resolves the same :class:`ExperimentConfig` (JSON file, then
``--seed``/``--out``, then ``--set path=value`` overrides) and works inside
one output directory, so the staged commands ``gen-data -> train -> attack ->
merge -> eval -> defend`` reproduce ``run`` exactly.

Exit codes: 0 success, 2 configuration error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ConfigError, MergeHijackError
from .experiment import (
    DEFENSES,
    ExperimentConfig,
    SweepSpec,
    TaskData,
    attack_upload,
    build_world,
    consolidate_reports,
    defense_report,
    evaluate_models,
    load_config,
    make_datasets,
    merge_spec_of,
    run_experiment,
    summary_table,
    sweep,
    train_models,
    with_override,
)
from .merge import merge
from .synth_data import load_jsonl, save_jsonl
from .tensor_store import TaskVector, load_checkpoint, save_checkpoint

log = logging.getLogger("mergehijack")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects path=value, got {item!r}")
        path, value = item.split("=", 1)
        cfg = with_override(cfg, path.strip(), value)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    cfg.validate()
    return cfg


def _out_dir(cfg: ExperimentConfig) -> str:
    if not cfg.output_dir:
        raise ConfigError("this command needs an output directory (--out)")
    return cfg.output_dir


def _paths(out: str) -> dict[str, str]:
    return {k: os.path.join(out, k) for k in ("datasets", "checkpoints", "reports", "trace")}


def _write_config(cfg: ExperimentConfig, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")


def _save_datasets(data: TaskData, out: str) -> None:
    d = _paths(out)["datasets"]
    os.makedirs(d, exist_ok=True)
    for tid in data.train:
        save_jsonl(data.train[tid], os.path.join(d, f"{tid}.train.jsonl"))
        save_jsonl(data.test[tid], os.path.join(d, f"{tid}.test.jsonl"))
    save_jsonl(data.reference_train, os.path.join(d, "reference.train.jsonl"))
    save_jsonl(data.shadow, os.path.join(d, "shadow.jsonl"))


def _load_datasets(cfg: ExperimentConfig, world, out: str) -> TaskData:
    """Datasets from ``out/datasets`` when present, regenerated otherwise."""
    d = _paths(out)["datasets"]
    if not os.path.isdir(d):
        log.info("no datasets under %s; regenerating from the config", out)
        return make_datasets(cfg, world)
    train, test = {}, {}
    for spec in world.tasks:
        train[spec.name] = load_jsonl(os.path.join(d, f"{spec.name}.train.jsonl"), "train")
        test[spec.name] = load_jsonl(os.path.join(d, f"{spec.name}.test.jsonl"), "test")
    ref = load_jsonl(os.path.join(d, "reference.train.jsonl"), "train")
    shadow = load_jsonl(os.path.join(d, "shadow.jsonl"), "train")
    return TaskData(train, test, ref, shadow)


def _ckpt(out: str, name: str) -> str:
    return os.path.join(_paths(out)["checkpoints"], f"{name}.mhj")


def _load_uploads(world, out: str) -> dict:
    return {spec.name: load_checkpoint(_ckpt(out, f"upload_{spec.name}")) for spec in world.tasks}


def _malicious_or_clean(cfg, world, out, uploads):
    if cfg.attack.enabled:
        return load_checkpoint(_ckpt(out, "malicious_upload"))
    return uploads[world.surrogate.name]


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    world = build_world(cfg)
    data = make_datasets(cfg, world)
    _write_config(cfg, out)
    _save_datasets(data, out)
    print(f"wrote {len(data.train)} tasks + shadow ({len(data.shadow)} samples) to {_paths(out)['datasets']}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    world = build_world(cfg)
    data = _load_datasets(cfg, world, out)
    base, uploads, reference = train_models(cfg, world, data)
    os.makedirs(_paths(out)["checkpoints"], exist_ok=True)
    save_checkpoint(base, _ckpt(out, "base"))
    for tid, model in uploads.items():
        save_checkpoint(model, _ckpt(out, f"upload_{tid}"))
    save_checkpoint(reference, _ckpt(out, "reference"))
    print(f"trained base, {len(uploads)} clean uploads and the reference model")
    return EXIT_OK


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    world = build_world(cfg)
    data = _load_datasets(cfg, world, out)
    base = load_checkpoint(_ckpt(out, "base"))
    upload, artifacts = attack_upload(cfg, world, base, data)
    save_checkpoint(upload, _ckpt(out, "malicious_upload"))
    artifacts.save(_paths(out)["trace"])
    print(json.dumps(artifacts.trace.summary(), sort_keys=True))
    return EXIT_OK


def cmd_merge(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    world = build_world(cfg)
    base = load_checkpoint(_ckpt(out, "base"))
    uploads = _load_uploads(world, out)
    others = [uploads[spec.name] for spec in world.tasks[1:]]
    spec = merge_spec_of(cfg)
    clean = merge(base, [uploads[world.surrogate.name], *others], spec)
    save_checkpoint(clean, _ckpt(out, "merged_clean"))
    if not args.clean_only and cfg.attack.enabled:
        bad = merge(base, [load_checkpoint(_ckpt(out, "malicious_upload")), *others], spec)
        save_checkpoint(bad, _ckpt(out, "merged_malicious"))
    print(f"merged {len(world.tasks)} uploads with {spec.algorithm}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    world = build_world(cfg)
    data = _load_datasets(cfg, world, out)
    base = load_checkpoint(_ckpt(out, "base"))
    uploads = _load_uploads(world, out)
    malicious = _malicious_or_clean(cfg, world, out, uploads)
    tau_sparse = trace = None
    tdir = _paths(out)["trace"]
    if cfg.attack.enabled and os.path.exists(os.path.join(tdir, "trace.json")):
        tau_sparse = TaskVector(load_checkpoint(os.path.join(tdir, "tau_sparse.mhj")))
        with open(os.path.join(tdir, "trace.json"), encoding="utf-8") as fh:
            trace = json.load(fh)
    report = evaluate_models(cfg, world, base, uploads, malicious, data.test,
                             tau_sparse=tau_sparse, trace_summary=trace)
    rdir = _paths(out)["reports"]
    os.makedirs(rdir, exist_ok=True)
    with open(os.path.join(rdir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(os.path.join(rdir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_defend(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    world = build_world(cfg)
    data = _load_datasets(cfg, world, out)
    merged_path = _ckpt(out, "merged_malicious")
    if not os.path.exists(merged_path):
        raise ConfigError(f"{merged_path} missing; run `merge` first")
    merged = load_checkpoint(merged_path)
    reference = load_checkpoint(_ckpt(out, "reference"))
    rep = defense_report(cfg, world, merged, reference, data.test, [args.method])
    rdir = _paths(out)["reports"]
    os.makedirs(rdir, exist_ok=True)
    with open(os.path.join(rdir, f"defense_{args.method}.json"), "w", encoding="utf-8") as fh:
        json.dump(rep, fh, indent=2)
        fh.write("\n")
    for name, per_task in rep.items():
        if isinstance(per_task, dict):
            cells = "  ".join(f"{t}: bp={m['bp']:.3f} asr={m['asr']:.3f}" for t, m in per_task.items())
            print(f"{name:<18}{cells}")
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig, args) -> int:
    result = run_experiment(cfg)
    print(summary_table(result))
    if result.defense_report is not None:
        for name, per_task in result.defense_report.items():
            if isinstance(per_task, dict):
                asr = " ".join(f"{m['asr']:.3f}" for m in per_task.values())
                print(f"  defense {name:<18} ASR {asr}")
    if cfg.output_dir:
        print(f"artifacts in {cfg.output_dir}")
    return EXIT_OK


def _parse_values(text: str) -> list:
    try:
        values = json.loads(text)
    except json.JSONDecodeError:
        values = None
    if not isinstance(values, list):
        values = [json.loads(v) if _is_json(v) else v for v in text.split(",") if v.strip()]
    return values


def _is_json(text: str) -> bool:
    try:
        json.loads(text)
        return True
    except json.JSONDecodeError:
        return False


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    spec = SweepSpec(args.param, tuple(_parse_values(args.values)), args.reps)
    text, _ = sweep(cfg, spec)
    if cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        with open(os.path.join(cfg.output_dir, "sweep.csv"), "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    text = consolidate_reports(args.run_dirs)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "merge": cmd_merge,
    "eval": cmd_eval,
    "defend": cmd_defend,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="top-level 64-bit seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="PATH=VALUE",
                        help="override a config field, e.g. attack.lam=3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="mergehijack", parents=[common],
                                     description="Backdoor-through-merging laboratory on a toy classifier.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate task, reference and shadow datasets")
    sub.add_parser("train", parents=[common], help="pretrain the base and finetune the clean uploads")
    sub.add_parser("attack", parents=[common], help="build the malicious upload model")
    p = sub.add_parser("merge", parents=[common], help="merge clean and malicious upload sets")
    p.add_argument("--clean-only", action="store_true")
    sub.add_parser("eval", parents=[common], help="CP/BP/ASR report for the merged models")
    p = sub.add_parser("defend", parents=[common], help="evaluate one defense on the malicious merge")
    p.add_argument("--method", choices=DEFENSES, required=True)
    sub.add_parser("run", parents=[common], help="full experiment end to end")
    p = sub.add_parser("sweep", parents=[common], help="one run per value of a config field")
    p.add_argument("--param", required=True, help="dotted config path, e.g. attack.lam")
    p.add_argument("--values", required=True, help="comma list or JSON array")
    p.add_argument("--reps", type=int, default=1)
    p = sub.add_parser("report", parents=[common], help="consolidate run directories into one CSV")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--csv", help="also write the CSV here")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MergeHijackError, OSError, ValueError) as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
