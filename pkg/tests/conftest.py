"""Collects acceptance verdicts and prints one line per criterion at the end of the session."""

ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str):
    """A criterion may be recorded in several parts; it passes only if every part does."""
    ACCEPTANCE.setdefault(number, []).append((bool(passed), detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        verdict = "PASS" if all(p for p, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict} | " + "; ".join(d for _, d in parts))
