import pytest

CRITERIA = {}


@pytest.fixture(scope="session")
def criterion_report():
    """``report(n, name, passed, detail)`` records and prints one verdict line."""

    def report(n, name, passed, detail):
        line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        CRITERIA[n] = line
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
