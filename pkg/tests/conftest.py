import numpy as np
import pytest
from hypothesis import settings

from mhnmf.catalog import bundled_catalog
from mhnmf.chain import ConvergenceControls
from mhnmf.simulate import SimConfig, simulate

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def catalog():
    return bundled_catalog()


@pytest.fixture(scope="session")
def sim2(catalog):
    return simulate(SimConfig(N=2, G=16, seed=11), catalog)


@pytest.fixture
def fast_controls():
    return ConvergenceControls(MAP_over=100, MAP_every=20, miniters=150, maxiters=3000,
                               mh_iters=200, n_inference=100)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_LINES = pytest.StashKey()


def pytest_configure(config):
    config.stash[_LINES] = []
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


@pytest.fixture
def criterion(request):
    """Record (and print) one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print("\n" + line)
        request.config.stash[_LINES].append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines):
            terminalreporter.write_line(ln)
