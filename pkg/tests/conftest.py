import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then let the test assert."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        _VERDICTS[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        print(_VERDICTS[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
