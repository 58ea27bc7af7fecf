import pytest

_LINES: list[str] = []


class Recorder:
    """Collects one PASS/FAIL line per acceptance check."""

    def __call__(self, criterion: int, name: str, ok: bool, detail: str = "") -> bool:
        line = f"[AC{criterion:02d}] {'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
        print(line, flush=True)
        _LINES.append(line)
        return ok

    def note(self, criterion: int, text: str) -> None:
        line = f"[AC{criterion:02d}] INFO {text}"
        print(line, flush=True)
        _LINES.append(line)


@pytest.fixture(scope="session")
def acceptance():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: s[:6]):
            terminalreporter.write_line(line)
