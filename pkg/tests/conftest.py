import functools

import numpy as np
import pytest

from zsep.cli.commands import fit_model, model_from_records
from zsep.cli.config import ExperimentConfig, parse_config
from zsep.scene import LabelRegistry, default_labels
from zsep.schedule import default_schedule

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@functools.lru_cache(maxsize=None)
def trained_tiny(hidden: int = 256, seed: int = 0):
    """The CLI's default tiny denoiser at a given width and seed (cached per session)."""
    cfg = ExperimentConfig()
    records, losses = fit_model(cfg, hidden=hidden, seed=seed)
    return model_from_records(records, cfg), losses


@functools.lru_cache(maxsize=None)
def small_tiny(epochs: int = 3, hidden: int = 16, seed: int = 0):
    cfg = parse_config({"dataset": {"n_per_label": 16},
                        "denoiser": {"kind": "tiny", "hidden": hidden, "epochs": epochs, "dtype": "float64"}})
    records, losses = fit_model(cfg, seed=seed)
    return model_from_records(records, cfg), losses


@pytest.fixture(scope="session")
def sched():
    return default_schedule()


@pytest.fixture(scope="session")
def registry():
    return LabelRegistry(default_labels())


@pytest.fixture(scope="session")
def analytic_model(sched):
    cfg = parse_config({"denoiser": {"kind": "analytic"}})
    return model_from_records(fit_model(cfg)[0], cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
