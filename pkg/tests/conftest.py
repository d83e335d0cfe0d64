import numpy as np
import pytest

from spmagic.data import Dataset, ExpressionMatrix, SpatialCoords

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(n=40, g=12, seed=0, labels=True):
    r = np.random.default_rng(seed)
    values = r.poisson(3.0, (n, g)).astype(float)
    values[:, 0] += 1  # no empty spots
    spots = [f"s{i}" for i in range(n)]
    genes = [f"g{j}" for j in range(g)]
    lab = r.integers(0, 3, n) if labels else None
    return Dataset(ExpressionMatrix(values, spots, genes), SpatialCoords(r.uniform(0, 100, (n, 2))), lab)


@pytest.fixture
def small_dataset():
    return make_dataset()
