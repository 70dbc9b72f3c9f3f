"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

ACCEPTANCE = []   # (criterion, verdict, detail)


def record(criterion, passed, detail=""):
    ACCEPTANCE.append((str(criterion), "PASS" if passed else "FAIL", detail))
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")


def record_skip(criterion, detail=""):
    ACCEPTANCE.append((str(criterion), "SKIP", detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, verdict, detail in ACCEPTANCE:
        terminalreporter.write_line(f"criterion {crit:<12} {verdict}  {detail}")
