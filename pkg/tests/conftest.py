import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("smartmc", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("smartmc")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


# acceptance criteria report: one line per criterion, printed at the end of the run
ACCEPTANCE: dict = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        known = exc_type is not None and issubclass(exc_type, pytest.xfail.Exception)
        status = "PASS" if ok else "XFAIL" if known else "FAIL"
        note = self.detail if ok else f"{exc_type.__name__}: {exc}".splitlines()[0][:200]
        if known:
            note = f"{self.detail}  ({exc})"
        line = f"criterion {self.number:2d} {status}  {self.title}  {note}".rstrip()
        ACCEPTANCE[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
