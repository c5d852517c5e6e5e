"""Shared pytest wiring: collect acceptance verdict lines for the run footer.

The acceptance tests register one line per graded criterion; printing them in
the terminal summary keeps the verdicts visible even when every test passes
and stdout capture would otherwise swallow them.
"""

ACCEPTANCE_LINES = []


def record_verdict(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
