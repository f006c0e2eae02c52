import numpy as np
import pytest

from prostate_dl.phantom import PhantomParams, generate_studies


@pytest.fixture(scope="session")
def small_params():
    # shrunken extents keep generation and training fast
    return PhantomParams(adc_extent=(16, 32, 32), t2w_extent=(16, 48, 48), lesion_radius=(4.0, 12.0))


@pytest.fixture(scope="session")
def small_cohort(small_params):
    return generate_studies(10, seed=5, params=small_params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    Usage: ``criterion(n, passed, detail)``; the line is printed immediately and
    repeated in the terminal summary.
    """
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[_ACCEPTANCE_KEY].append(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
