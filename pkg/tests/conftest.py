import numpy as np
import pytest

from prcp.classifier import SyntheticSoftmaxClassifier, SyntheticTaskSpec

_ACCEPTANCE_LINES: list[str] = []


def random_classifier(rng, n_classes=3, dim=2, scale=2.0):
    return SyntheticSoftmaxClassifier(
        scale * rng.standard_normal((n_classes, dim)), rng.standard_normal(n_classes)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_task():
    return SyntheticTaskSpec.axis_aligned(n_classes=4, dim=8, spacing=1.25, sigma_x=0.5)


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
