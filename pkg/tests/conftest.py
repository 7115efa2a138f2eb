import pytest

CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record a one-line verdict; printed both live and in the terminal summary."""
    def record(name: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        CRITERIA.append(line)
        print("\n" + line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
