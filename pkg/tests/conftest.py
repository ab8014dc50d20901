import sys

import numpy as np
import pytest

from wfdetect import doe, sim_workflow


@pytest.fixture(scope="session")
def config():
    return sim_workflow.case_config()


@pytest.fixture(scope="session")
def short_cycle():
    return sim_workflow.default_cycle(960)


@pytest.fixture(scope="session")
def t0(config, short_cycle):
    return sim_workflow.simulate(config, short_cycle)


@pytest.fixture(scope="session")
def schedule(config, short_cycle):
    return doe.make_schedule(doe.full_factorial(config.module_names), short_cycle.n, 20)


@pytest.fixture(scope="session")
def t0doe(config, short_cycle, schedule):
    return sim_workflow.simulate(config, short_cycle, schedule)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
