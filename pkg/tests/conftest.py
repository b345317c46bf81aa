import contextlib
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cortexforge.netcore import NetworkConfig  # noqa: E402
from cortexforge.toydata import make_face_dataset  # noqa: E402


def desk_config(pool_size=1, lcn_window=5, **kw):
    """One stage on 16x16x1 inputs: rf 6, stride 5, 4 maps."""
    stage = dict(rf_size=6, stride=5, num_maps=4, pool_size=pool_size, lcn_window=lcn_window)
    stage.update(kw)
    return NetworkConfig.chain(16, 16, 1, [stage])


def tiny_config():
    return NetworkConfig.chain(8, 8, 1, [dict(rf_size=4, stride=2, num_maps=2, pool_size=2,
                                              lcn_window=1)])


@pytest.fixture
def small_faces():
    return make_face_dataset(60, 100, 16, seed=7)


@pytest.fixture
def tiny_images():
    return np.random.default_rng(0).uniform(size=(40, 8, 8, 1)).astype(np.float32)


# ---------------------------------------------------------------------------
# acceptance reporting


def pytest_configure(config):
    config.acceptance_results = {}


@pytest.fixture
def criterion(request):
    """``with criterion(n, title, budget_s, extra_s=0):`` records PASS/FAIL and enforces the budget."""
    results = request.config.acceptance_results

    @contextlib.contextmanager
    def record(number, title, budget, extra=0.0):
        start = time.perf_counter()
        ok = False
        elapsed = extra
        try:
            yield
            elapsed = extra + time.perf_counter() - start
            assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"
            ok = True
        finally:
            elapsed = extra + time.perf_counter() - start
            results[number] = (title, ok, elapsed, budget)
            print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title} ({elapsed:.1f}s)")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, elapsed, budget = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}"
                                    f"  [{elapsed:.1f}s / {budget}s]")
