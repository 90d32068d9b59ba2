import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: dict[int, tuple[str, bool, str]] = {}


def record(number: int, name: str, passed: bool, detail: str):
    _RESULTS[number] = (name, bool(passed), detail)
    print(f"AC{number} {'PASS' if passed else 'FAIL'} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        name, passed, detail = _RESULTS[n]
        terminalreporter.write_line(f"AC{n} {'PASS' if passed else 'FAIL'}  {name}: {detail}")
