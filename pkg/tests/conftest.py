import pytest

_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line immediately and again in the session summary."""

    def emit(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{label}: {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
