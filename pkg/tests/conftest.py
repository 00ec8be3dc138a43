import warnings

import pytest
from hypothesis import HealthCheck, settings

from hashview.synth import synthetic_database

settings.register_profile(
    "repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_db():
    """Two objects, 64 views each."""
    return synthetic_database(2, 64, seed=11)


@pytest.fixture(scope="session")
def sparse_db():
    return synthetic_database(3, 640, seed=5, fg_density=0.2)


@pytest.fixture(autouse=True)
def _quiet_key_warnings():
    from hashview.keyselect import KeySelectionWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", KeySelectionWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        if number in RESULTS:
            ok, detail = RESULTS[number]
            terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {number:2d}: not run")
