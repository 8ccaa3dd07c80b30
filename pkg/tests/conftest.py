import pytest

_verdicts = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion; returns the outcome."""
    def record(number, title, ok, detail=""):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}"
        if detail:
            line += f" | {detail}"
        _verdicts.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
