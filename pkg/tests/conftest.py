import numpy as np
import pytest

from amlab.config import ExperimentConfig
from amlab.data import LabeledDataset
from amlab.pipeline import prepare


@pytest.fixture(scope="session")
def default_cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def ctx0(default_cfg):
    """Defender, misinformer and datasets of the default preset at seed 0."""
    return prepare(default_cfg, 0)


@pytest.fixture
def two_blobs():
    """Linearly separable 2-cluster 2-D toy set."""
    rng = np.random.default_rng(5)
    a = rng.normal([-2.0, -2.0], 0.3, size=(50, 2))
    b = rng.normal([2.0, 2.0], 0.3, size=(50, 2))
    x = np.concatenate([a, b])
    y = np.repeat([0, 1], 50)
    return LabeledDataset(x, y, "defender-train", "blobs", 2)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and return the flag."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} | {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
