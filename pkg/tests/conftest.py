import numpy as np
import pytest

from dynafs.data import SyntheticConfig, generate_synthetic, prepare_splits


@pytest.fixture(scope="session")
def small_splits():
    data = generate_synthetic(SyntheticConfig(n_subjects=120, n_features=6, n_informative=2, n_static=1,
                                              tick_range=(6, 9), seed=3))
    return prepare_splits(data, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
