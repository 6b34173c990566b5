import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS = []


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
    VERDICTS.append((number, line))
    print(line)
    return ok


def note(number, detail):
    line = f"INFO  criterion {number:>2}: {detail}"
    VERDICTS.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(line)
