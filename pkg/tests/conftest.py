import numpy as np
import pytest
from hypothesis import settings

from vdest.sim.scenario import load_scenario

# numba dispatch makes the first call slow; deadlines only add noise here
settings.register_profile("vdest", deadline=None, max_examples=60)
settings.load_profile("vdest")


@pytest.fixture(scope="session")
def lvms():
    return load_scenario("lvms_like")


@pytest.fixture(scope="session")
def monza():
    return load_scenario("monza_like")


@pytest.fixture(scope="session")
def lvms_truth(lvms):
    return lvms.truth()


@pytest.fixture(scope="session")
def lvms_track(lvms):
    return lvms.track()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criterion(request):
    """Record one acceptance line: criterion(n, name, ok, detail)."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(n, name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} C{n:<2d} {name}: {detail}"
        lines.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
