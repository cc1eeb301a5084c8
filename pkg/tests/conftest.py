import os

# serial deterministic mode unless the caller asked otherwise
os.environ.setdefault("TAPG_THREADS", "0")

ACCEPTANCE = []  # (sort key, line) pairs filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
