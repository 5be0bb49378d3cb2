import pytest

from tinydata import make_tiny

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def tiny():
    return make_tiny()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
