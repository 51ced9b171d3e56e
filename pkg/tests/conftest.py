import time

SESSION = {"start": time.perf_counter(), "criteria": []}


def pytest_sessionstart(session):
    SESSION["start"] = time.perf_counter()


def pytest_terminal_summary(terminalreporter):
    lines = SESSION["criteria"]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
