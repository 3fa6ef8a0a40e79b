"""Shared pytest hooks: acceptance tests record one verdict per criterion,
printed together at the end of the run."""

ACCEPTANCE = []


def record(criterion, passed, detail):
    ACCEPTANCE.append((criterion, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE, key=lambda r: str(r[0])):
        verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        terminalreporter.write_line(f"{verdict} criterion {criterion}: {detail}")
