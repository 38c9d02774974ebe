"""Shared pytest plumbing: collect acceptance-criterion verdicts and print
one line per criterion at the end of the session."""

CRITERION_LINES = []


def record_criterion(number, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    line = f"[criterion {number:2d}] {status}  {detail}".rstrip()
    CRITERION_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(CRITERION_LINES):
        terminalreporter.write_line(line)
