import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from churnsurv.config import load_config
from churnsurv.pipeline import run_all

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Lines recorded by the acceptance module; echoed in the terminal summary so
# they survive pytest's output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_RUN = {"n_customers": "1500", "epochs": "2", "seed": "3"}


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A complete pipeline run on a small synthetic draw, shared read-only."""
    out = tmp_path_factory.mktemp("small_run")
    cfg = load_config(overrides={**SMALL_RUN, "out": str(out)})
    lines = run_all(cfg)
    return cfg, lines
