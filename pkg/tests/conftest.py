"""Collects the acceptance verdict lines and prints them after the run."""

VERDICTS: list[str] = []


def record(line: str) -> None:
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
