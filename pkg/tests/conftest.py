import os

os.environ.setdefault("MPLBACKEND", "Agg")

_VERDICTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, summary: str) -> None:
    _VERDICTS[n] = (ok, summary)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {summary}")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, summary = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {summary}")
