"""Shared pytest plumbing.

The acceptance tests register one verdict per checklist criterion; after
the run a summary section prints one PASS/FAIL line for each so the
outcome is visible without digging through the test names.
"""

_CHECKLIST: list[tuple[int, bool, str]] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _CHECKLIST.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CHECKLIST:
        return
    terminalreporter.section("acceptance checklist")
    for number, passed, detail in sorted(_CHECKLIST):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict} - {detail}")
