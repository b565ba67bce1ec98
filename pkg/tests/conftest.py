from __future__ import annotations

from datetime import date

import numpy as np
import pandas as pd
import pytest

from cdrshock.cdr import StudyCalendar, TowerCluster, TowerGeo, make_records


@pytest.fixture
def towers():
    return {
        "A": TowerGeo("A", 45.0, 10.0),
        "B": TowerGeo("B", 45.0, 10.05),
        "C": TowerGeo("C", 45.1, 10.0),
        "Z": TowerGeo("Z", 46.0, 11.0),
    }


@pytest.fixture
def cluster():
    return TowerCluster("town", frozenset({"A", "B"}))


@pytest.fixture
def calendar():
    return StudyCalendar(date(2006, 1, 1), date(2006, 6, 30))


def records_from(rows):
    """rows: (caller, callee, caller_tower, callee_tower or None, 'YYYY-MM-DDTHH:MM:SS')"""
    if not rows:
        return make_records([], [], [], [], np.array([], dtype="datetime64[s]"))
    a, b, ta, tb, ts = zip(*rows)
    return make_records(a, b, ta, tb, pd.to_datetime(list(ts)).to_numpy())


# acceptance criteria register a one-line verdict here; printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].strip("C:"))):
            terminalreporter.write_line(line)
