import pytest

from dsse_admm import fixtures


@pytest.fixture(scope="session")
def two_area():
    return fixtures.two_area_instance()


@pytest.fixture(scope="session")
def block4():
    return fixtures.block_instance(4)


@pytest.fixture(scope="session")
def chain8():
    return fixtures.block_instance(8)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
