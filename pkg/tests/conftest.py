from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from edgeloop.scenario import default_scenario
from edgeloop.worldmodel import OccupancyGrid

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def default_cfg():
    return default_scenario()


@pytest.fixture(scope="session")
def office_grid(default_cfg):
    return default_cfg.grid


@pytest.fixture
def walled_room():
    """10x10 room, 1 m cells, border walls plus one interior wall."""
    cells = np.zeros((10, 10), dtype=bool)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = True
    cells[2:7, 5] = True
    return OccupancyGrid(cells, 1.0)


# acceptance reporting: one PASS/FAIL line per criterion, failing if any of its tests fail

_criteria: dict[int, dict] = {}


@pytest.fixture
def evidence(request):
    """Attach a short measured-value note to the criterion line."""
    def note(text: str) -> None:
        request.node.user_properties.append(("evidence", text))
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= not rep.failed
    if rep.when == "call":
        entry["notes"] += [v for k, v in item.user_properties if k == "evidence"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        notes = f" ({'; '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}{notes}")
