"""Shared fixtures; the acceptance suite prints one verdict line per criterion."""

import pytest

_VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records criterion ``n`` and returns ``ok``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        prev_ok, prev = _VERDICTS.get(n, (True, ""))
        _VERDICTS[n] = (prev_ok and bool(ok), f"{prev}; {detail}" if prev else detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
