from __future__ import annotations

import pytest

from mergehijack.experiment import ExperimentConfig, run_pipeline, with_override

FAST = {
    "n_train": 120,
    "n_test": 60,
    "n_shadow": 2,
    "pretrain.per_task_n": 60,
    "attack.shadow_per_task_n": 40,
    "defense.calib_n": 20,
}


def fast_config(**extra) -> ExperimentConfig:
    """A seconds-scale config for plumbing tests (metrics are not meaningful)."""
    cfg = ExperimentConfig()
    for path, value in {**FAST, **extra}.items():
        cfg = with_override(cfg, path, value)
    return cfg


def fast_set_args(**extra) -> list[str]:
    out = []
    for path, value in {**FAST, **extra}.items():
        out += ["--set", f"{path}={value}"]
    return out


@pytest.fixture(scope="session")
def default_result():
    """The default experiment (defenses included), run once per session."""
    return run_pipeline(ExperimentConfig())


# --- acceptance summary: one line per criterion -------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        n = int(report.nodeid.rsplit("_criterion_", 1)[1].split("_")[0])
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[n] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
