from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

from shapewarp.data_synth import generate_dataset

settings.register_profile("unit", max_examples=40, deadline=None)
settings.load_profile("unit")
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(16, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = pytest.StashKey[list]()
# (nodeid, phase, outcome, seconds) for every non-acceptance test phase in this session
_UNIT_REPORTS: list[tuple[str, str, str, float]] = []


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so it can read the unit-suite timings from this session
    items.sort(key=lambda item: item.get_closest_marker("acceptance") is not None)


def pytest_runtest_logreport(report):
    if "acceptance" not in report.keywords:
        _UNIT_REPORTS.append((report.nodeid, report.when, report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def criterion(request):
    """Record and print a one-line verdict for an acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line, flush=True)
        return ok

    return record


@pytest.fixture(scope="session")
def unit_reports():
    return _UNIT_REPORTS
