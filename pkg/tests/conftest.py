"""Shared test plumbing: the acceptance-criteria summary table.

Acceptance tests register one line per criterion via ``record_criterion``;
the table prints in the terminal summary so every run shows a compact
pass/fail line for each criterion regardless of capture settings.
"""

_CRITERIA = {}


def record_criterion(number, description, passed, detail=""):
    _CRITERIA[number] = (description, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        description, passed, detail = _CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number}: {status} - {description}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
