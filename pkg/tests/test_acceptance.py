"""The twelve acceptance criteria, each at its stated tolerance.

Every test stores a one-line ``detail`` that the session summary prints next
to the criterion's PASS/FAIL status.
"""

from __future__ import annotations

import os
import time

import numpy as np
import pytest

from mergehijack.experiment import ExperimentConfig, SweepSpec, run_experiment, run_pipeline, sweep
from mergehijack.hijack import keep_probabilities, rank_normalize, sparsify
from mergehijack.merge import merge_breadcrumbs, merge_dare, merge_della, merge_ta
from mergehijack.tensor_store import TaskVector
from mergehijack.toy_model import ModelConfig, init_model, loss_and_grad

DELTA, EPS = 0.7, 0.2


@pytest.fixture
def detail(record_property):
    def put(text: str) -> None:
        record_property("detail", text)
    return put


def _mc_within(mean, mean_sq, draws, truth, k=4.0):
    """Per coordinate: is the sample mean within ``k`` standard errors of ``truth``?"""
    var = np.maximum(mean_sq - mean**2, 0.0) * draws / (draws - 1)
    se = np.sqrt(var / draws)
    return np.abs(mean - truth) < k * se + 1e-15


def test_criterion_01_sparsify_unbiased(detail):
    t0 = time.perf_counter()
    tau = TaskVector({"w": np.random.default_rng(2024).normal(size=64)})
    p = keep_probabilities(rank_normalize(tau), DELTA, EPS)
    draws = 20_000
    acc, acc2 = np.zeros(64), np.zeros(64)
    for seed in range(draws):
        x = sparsify(tau, p, seed)[0]["w"]
        acc += x
        acc2 += x * x
    ok = _mc_within(acc / draws, acc2 / draws, draws, tau["w"])
    elapsed = time.perf_counter() - t0
    detail(f"{ok.mean():.3f} of coordinates within 4 SE, {elapsed:.1f}s")
    assert ok.mean() >= 0.99
    assert elapsed < 10


def test_criterion_02_window_and_density(detail):
    t0 = time.perf_counter()
    m = 10_000
    tau = TaskVector({"w": np.random.default_rng(7).normal(size=m)})
    assert len(np.unique(np.abs(tau["w"]))) == m
    p = keep_probabilities(rank_normalize(tau), DELTA, EPS)
    kept = sparsify(tau, p, 11)[1].keep_mask.mean()
    sigma = np.sqrt(DELTA * (1 - DELTA) / m)
    elapsed = time.perf_counter() - t0
    detail(f"p in [{float(p.min())!r}, {float(p.max())!r}], mean(p)-0.7={p.mean() - DELTA:.1e}, "
           f"kept {kept:.4f} ({(kept - DELTA) / sigma:+.2f} sigma), {elapsed:.2f}s")
    assert p.min() >= 0.5 and p.max() <= 0.9
    assert p.min() == 0.5 and p.max() == 0.9
    assert abs(p.mean() - DELTA) < 1e-12
    assert abs(kept - DELTA) <= 5 * sigma
    assert elapsed < 1


def test_criterion_03_hand_vector(detail):
    tau = TaskVector({"w": [0.1, -0.4, 0.3]})
    r = rank_normalize(tau)
    p = keep_probabilities(r, DELTA, EPS)
    seed = next(s for s in range(1000) if sparsify(tau, p, s)[1].keep_mask.all())
    kept = sparsify(tau, p, seed)[0]["w"]
    detail(f"r={r.tolist()} p={np.round(p, 12).tolist()} tau'={np.round(kept, 4).tolist()}")
    np.testing.assert_allclose(r, [0.0, 1.0, 0.5], atol=1e-12)
    np.testing.assert_allclose(p, [0.5, 0.9, 0.7], atol=1e-12)
    np.testing.assert_allclose(kept, [0.2, -0.4444, 0.4286], atol=1e-4)


def test_criterion_04_gradient_check(detail):
    t0 = time.perf_counter()
    params = init_model(ModelConfig(8, 3, 4, 3), 99)
    rng = np.random.default_rng(5)
    params = params.with_entries({"hidden.b": rng.normal(0, 0.2, 4), "out.b": rng.normal(0, 0.2, 3)})
    batch = [((0, 3, 3, 7), 0), ((1, 2), 1), ((6, 5, 4), 2)]
    analytic = loss_and_grad(params, batch)[1].flatten()
    flat, h = params.flatten(), 1e-5
    numeric = np.empty_like(flat)
    for j in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[j] += h
        down[j] -= h
        numeric[j] = (loss_and_grad(params.unflatten(up), batch)[0]
                      - loss_and_grad(params.unflatten(down), batch)[0]) / (2 * h)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    elapsed = time.perf_counter() - t0
    detail(f"max relative error {rel.max():.2e} over {flat.size} coordinates, {elapsed:.2f}s")
    assert rel.max() < 1e-5
    assert elapsed < 5


def test_criterion_05_merge_identities(detail):
    t0 = time.perf_counter()
    rng = np.random.default_rng(31)
    d = TaskVector({"W": rng.normal(size=(4, 6)), "b": rng.normal(size=6)})
    others = [TaskVector({"W": rng.normal(size=(4, 6)), "b": rng.normal(size=6)}) for _ in range(2)]
    assert merge_ta([d], [1.0]).equals(d)
    ta = merge_ta([d, *others], [1 / 3])
    assert merge_breadcrumbs([d, *others], [1 / 3], 0.0, 0.0).equals(ta)
    assert merge_dare([d, *others], [1 / 3], 0.0, 0).equals(ta)

    draws, truth = 20_000, d.flatten()
    fractions = {}
    for name, fn in (("dare", lambda s: merge_dare([d], [1.0], 0.2, s)),
                     ("della", lambda s: merge_della([d], [1.0], 0.8, 0.1, s))):
        acc, acc2 = np.zeros(truth.size), np.zeros(truth.size)
        for seed in range(draws):
            x = fn(seed).flatten()
            acc += x
            acc2 += x * x
        fractions[name] = _mc_within(acc / draws, acc2 / draws, draws, truth).mean()
    elapsed = time.perf_counter() - t0
    detail(f"identities hold; within 4 SE: dare {fractions['dare']:.3f}, della {fractions['della']:.3f}; {elapsed:.1f}s")
    assert fractions["dare"] == 1.0 and fractions["della"] == 1.0
    assert elapsed < 30


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    cfg = ExperimentConfig()
    cfg.output_dir = str(tmp_path_factory.mktemp("default") / "run")
    t0 = time.perf_counter()
    result = run_experiment(cfg)
    return result, time.perf_counter() - t0


def test_criterion_06_default_experiment(default_run, detail):
    result, elapsed = default_run
    rep = result.report
    tasks = rep.tasks
    detail("ASR " + " ".join(f"{m.asr:.3f}" for m in tasks.values())
           + " | BP-CP " + " ".join(f"{m.bp - m.cp:+.3f}" for m in tasks.values())
           + f" | ASR-V {rep.asr_v:+.3f} BP-V {rep.bp_v:+.3f} | {elapsed:.1f}s (defenses included)")
    assert rep.meta["n_tasks"] == 3 and rep.meta["algorithm"] == "ta"
    assert rep.meta["ratios"] == [1 / 3] * 3
    assert all(m.asr >= 0.90 for m in tasks.values())
    assert all(abs(m.bp - m.cp) <= 0.05 for m in tasks.values())
    assert abs(rep.asr_v) <= 0.05 and abs(rep.bp_v) <= 0.05
    assert elapsed < 300


def test_criterion_07_lambda_sweep(detail):
    t0 = time.perf_counter()
    _, results = sweep(ExperimentConfig(), SweepSpec("attack.lam", (1.0, 1.5, 2.0, 3.0)))
    sur = [r.report.tasks[r.surrogate_id].asr for r in results]
    cps = [{k: m.cp for k, m in r.report.tasks.items()} for r in results]
    elapsed = time.perf_counter() - t0
    detail(f"surrogate ASR by lambda 1/1.5/2/3: {sur}; {elapsed:.1f}s")
    assert all(a <= b for a, b in zip(sur, sur[1:]))
    assert all(c == cps[0] for c in cps)
    assert elapsed < 1200


def test_criterion_08_no_attack_control(detail):
    cfg = ExperimentConfig()
    cfg.attack.enabled = False
    rep = run_pipeline(cfg).report
    asr = [m.asr for m in rep.tasks.values()]
    detail(f"ASR {asr}")
    assert all(a <= 0.02 for a in asr)


def _defense(default_result, name):
    return default_result.defense_report[name]


def test_criterion_09_fine_pruning(default_result, detail):
    pruned = _defense(default_result, "fine_prune")
    tuned = _defense(default_result, "fine_prune_ft")
    detail("ASR after finetune " + " ".join(f"{m['asr']:.3f}" for m in tuned.values())
           + " | after prune " + " ".join(f"{m['asr']:.3f}" for m in pruned.values())
           + f" | units {default_result.defense_report['fine_prune_units']}")
    assert default_result.config.defense.prune_ratio == 0.2
    assert default_result.config.defense.calib_n == 100
    assert len(default_result.defense_report["fine_prune_units"]) == int(0.2 * default_result.config.hidden_dim)
    assert all(m["asr"] >= 0.80 for m in pruned.values())


def test_criterion_10_suspicion_filter(default_result, detail):
    filt = _defense(default_result, "suspicion_filter")
    none = _defense(default_result, "none")
    drops = [none[t]["bp"] - filt[t]["bp"] for t in none]
    detail("ASR " + " ".join(f"{m['asr']:.3f}" for m in filt.values())
           + " | BP drop " + " ".join(f"{x:+.3f}" for x in drops))
    assert default_result.config.defense.alpha == 20.0
    assert all(m["asr"] <= 0.05 for m in filt.values())
    # measurable: no task gains and the mean drop is at least 0.5 points
    assert all(x >= 0 for x in drops) and np.mean(drops) >= 0.005


def test_criterion_11_paraphrase(default_result, detail):
    para = _defense(default_result, "paraphrase_sim")
    detail("residual ASR " + " ".join(f"{m['asr']:.3f}" for m in para.values()))
    assert default_result.config.defense.q_remove == 0.6
    assert all(0.30 <= m["asr"] <= 0.50 for m in para.values())


def _ckpts(run_dir):
    d = os.path.join(run_dir, "checkpoints")
    return {n: open(os.path.join(d, n), "rb").read() for n in sorted(os.listdir(d))}


def test_criterion_12_determinism(default_run, tmp_path, detail):
    first, _ = default_run
    cfg = ExperimentConfig()
    cfg.output_dir = str(tmp_path / "again")
    run_experiment(cfg)
    a_report = open(os.path.join(first.config.output_dir, "reports", "report.json"), "rb").read()
    b_report = open(os.path.join(cfg.output_dir, "reports", "report.json"), "rb").read()
    a_ck, b_ck = _ckpts(first.config.output_dir), _ckpts(cfg.output_dir)
    same = [n for n in a_ck if a_ck[n] == b_ck.get(n)]
    detail(f"report.json identical: {a_report == b_report}; {len(same)}/{len(a_ck)} checkpoints identical")
    assert a_report == b_report
    assert a_ck.keys() == b_ck.keys() and len(same) == len(a_ck)
