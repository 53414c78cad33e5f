"""Shared pytest plumbing: a place for tests to record headline numbers that
should survive into the terminal summary (Dice scores, runtimes, trajectories)
even when every test passes."""

ACCEPTANCE_NOTES = []


def record_note(line: str) -> None:
    ACCEPTANCE_NOTES.append(str(line))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_NOTES:
        terminalreporter.section("acceptance details")
        for line in ACCEPTANCE_NOTES:
            terminalreporter.write_line(line)
