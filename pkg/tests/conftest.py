"""Shared pytest plumbing.

The acceptance suite registers one verdict line per criterion here; the
terminal-summary hook replays them after the run so they appear in the
report even though per-test stdout is captured.
"""

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)
