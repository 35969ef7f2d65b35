import numpy as np
import pytest

from voxscene.cloud import LabeledCloud


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cloud(rng, n=1000, n_classes=3, scale=5.0) -> LabeledCloud:
    pts = rng.uniform(-scale, scale, size=(n, 3))
    return LabeledCloud(pts, rng.integers(0, n_classes, size=n),
                        {i: f"c{i}" for i in range(n_classes)})


# acceptance results are collected here and echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
