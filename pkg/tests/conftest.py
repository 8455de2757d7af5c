"""Shared pytest hooks: the acceptance suite's per-criterion verdicts are echoed in the terminal summary."""

# (criterion number, line) pairs appended by tests/test_acceptance.py
CRITERIA_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(CRITERIA_LINES, key=lambda item: item[0]):
        terminalreporter.write_line(line)
