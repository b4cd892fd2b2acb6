import os

import pytest

from delaysmp.oracles import read_golden

GOLDEN = os.path.join(os.path.dirname(os.path.abspath(__file__)), "golden")
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def golden():
    return lambda name: read_golden(os.path.join(GOLDEN, f"{name}.csv"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
