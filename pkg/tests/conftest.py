"""Shared fixtures; acceptance results are echoed in the terminal summary."""
import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class _Recorder:
    def __call__(self, number: int, ok: bool, detail: str) -> bool:
        ok = bool(ok)
        _ACCEPTANCE[number] = (ok, detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok


@pytest.fixture
def criterion():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
