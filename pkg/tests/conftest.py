import pytest

# one line per acceptance criterion, printed at the end of the session
_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    def _record(number: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        assert ok, detail

    def _skip(number: int, reason: str) -> None:
        _ACCEPTANCE[number] = f"criterion {number:>2}: SKIP  {reason}"
        pytest.skip(reason)

    _record.skip = _skip
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
