import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def full_rank(rng, n, d):
    """Gaussian n x d matrix; full column rank with probability one for n >= d."""
    return rng.standard_normal((n, d))


def pytest_terminal_summary(terminalreporter):
    # Acceptance verdicts are otherwise swallowed by output capture.
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
