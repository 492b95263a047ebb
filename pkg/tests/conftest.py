import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mscg.numerics import RngState

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return RngState(1234)


def onehot(classes, c):
    """``b x h x w`` integer map -> ``b x c x h x w`` uint8 one-hot."""
    classes = np.asarray(classes)
    out = np.zeros((classes.shape[0], c) + classes.shape[1:], dtype=np.uint8)
    np.put_along_axis(out, classes[:, None], 1, axis=1)
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
