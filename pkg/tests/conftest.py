import numpy as np
import pytest

from softq_lab import dataset as ds
from softq_lab.plant import PlantConfig


@pytest.fixture(scope="session")
def small_dataset():
    """30 noise-free sequences of 60 steps."""
    return ds.collect(PlantConfig(), n_sequences=30, steps_per_sequence=60, expert_fraction=0.1, seed=3)


@pytest.fixture(scope="session")
def small_split(small_dataset):
    return ds.split(small_dataset, 0.2, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record a one-line verdict for the end-of-run acceptance summary."""
    def record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
        _CRITERIA.append((label, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
