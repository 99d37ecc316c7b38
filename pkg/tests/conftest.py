import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eegsal import dataio as D
from eegsal.gradcheck import tiny_layout

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def layout62():
    return D.load_layout(D.shipped_layout(62))


@pytest.fixture(scope="session")
def layout32():
    return D.load_layout(D.shipped_layout(32))


@pytest.fixture
def tiny():
    return tiny_layout()


@pytest.fixture(scope="session")
def small_synth(layout62):
    """3 subjects, 4 trials of 6 windows: quick to train on."""
    spec = D.SyntheticSpec(n_subjects=3, trials_per_subject=4, windows_per_trial=6, seed=3)
    return D.generate_synthetic(spec, layout62)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].lstrip("#"))):
            terminalreporter.write_line(line)
