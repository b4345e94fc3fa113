import datetime as dt

import numpy as np
import pytest

from gsci_slv import synthetic as sy
from gsci_slv.dupire_lv import calibrate_local_vol


@pytest.fixture(scope="session")
def curve():
    return sy.wti_like_curve()


@pytest.fixture(scope="session")
def discount():
    return sy.flat_discount()


@pytest.fixture(scope="session")
def schedule(curve):
    return sy.schedule_for(curve)


@pytest.fixture(scope="session")
def skew_quotes(curve, discount):
    return sy.futures_quotes(curve, discount)


@pytest.fixture(scope="session")
def lv_surface(skew_quotes, curve, discount):
    return calibrate_local_vol(skew_quotes, curve, discount, 0.3)


@pytest.fixture
def two_contract_curve():
    return sy.FuturesCurve(dt.date(2020, 1, 2), (dt.date(2020, 3, 20), dt.date(2020, 4, 20)), (50.0, 52.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Append ``(criterion, ok, detail)``; printed after the run."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(name, ok, detail=""):
        line = f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        lines.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
