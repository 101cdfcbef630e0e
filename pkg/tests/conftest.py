import pytest

_VERDICTS: list[tuple[int, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(n, ok, detail)``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        _VERDICTS.append((n, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
