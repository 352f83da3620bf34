import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_spd(rng, d, rank=None):
    rank = d if rank is None else rank
    g = rng.standard_normal((d, rank))
    return g @ g.T + (1e-3 * np.eye(d) if rank == d else 0.0)


def random_stiefel(rng, l, h):
    q, _ = np.linalg.qr(rng.standard_normal((l, h)))
    return q


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
