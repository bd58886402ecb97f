import logging
import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(max(1, os.cpu_count() or 1))
logging.getLogger("idus.segnet").setLevel(logging.ERROR)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    from idus.synth import SynthConfig, generate_synthetic

    return generate_synthetic(SynthConfig(n_images=6, side=64, seed=3))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion covered by a test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, text = mark.args
    table = item.config._criteria
    ok = rep.passed if rep.when == "call" else not rep.failed
    prev = table.get(n, (text, True))
    if rep.when == "call" or not ok:
        table[n] = (text, prev[1] and ok)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = getattr(config, "_criteria", {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        text, ok = table[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {text}")
