import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def record_criterion(pytestconfig):
    """Log one acceptance line; the terminal summary prints them all."""

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        pytestconfig.stash[_RESULTS].append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(results):
        terminalreporter.write_line(line)
