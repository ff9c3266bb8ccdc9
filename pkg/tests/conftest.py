import time

import numpy as np
import pytest
import torch

from diffmap.mapforge import GridSpec, generate_scene, preset

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_cfg():
    return preset("short")


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(32, 32, 0.5)


@pytest.fixture(scope="session")
def scenes(short_cfg):
    """Four default scenes shared by the cheaper pipeline tests."""
    return [generate_scene(s, short_cfg) for s in range(4)]


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record a one-line PASS/FAIL verdict for an acceptance test.

    The test stores a short detail string through ``record(detail)``; the
    verdict itself comes from the test outcome.
    """
    details = []
    start = time.perf_counter()
    yield details.append
    number = request.node.get_closest_marker("criterion").args[0]
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    elapsed = time.perf_counter() - start
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s) {'; '.join(details)}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
