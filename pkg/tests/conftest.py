import os
import sys
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from partial_options import taxi  # noqa: E402
from partial_options.option_models import exact_option_model  # noqa: E402
from partial_options.options import pretrain_taxi_options  # noqa: E402

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

@pytest.fixture(scope="session")
def taxi_mdp():
    return taxi.build_taxi_mdp()


@pytest.fixture(scope="session")
def taxi_options(taxi_mdp):
    return pretrain_taxi_options(taxi_mdp)


@pytest.fixture(scope="session")
def taxi_model(taxi_mdp, taxi_options):
    return exact_option_model(taxi_mdp, taxi_options)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance report -------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


class _Criterion:
    def __init__(self, log, number, title, limit_s):
        self.log, self.number, self.title, self.limit_s = log, number, title, limit_s
        self.details = []

    def note(self, text):
        self.details.append(text)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None and elapsed <= self.limit_s
        reason = ""
        if exc_type is not None:
            reason = f" -- {str(exc).splitlines()[0] if str(exc) else exc_type.__name__}"
        elif not ok:
            reason = f" -- over the {self.limit_s:g}s limit"
        extra = f" [{'; '.join(self.details)}]" if self.details else ""
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number}: {self.title} ({elapsed:.1f}s){extra}{reason}"
        self.log.append(line)
        print(line)
        if exc_type is None and not ok:
            raise AssertionError(f"criterion {self.number} took {elapsed:.1f}s, limit {self.limit_s:g}s")
        return False


@pytest.fixture
def criterion(request):
    log = request.config.stash[_ACCEPTANCE]
    return lambda number, title, limit_s: _Criterion(log, number, title, limit_s)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
