import pytest

CRITERIA: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one ``PASS``/``FAIL`` line for an acceptance criterion and echo it immediately."""

    def report(name: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        CRITERIA.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
