"""Shared pytest hooks: the acceptance suite reports one line per criterion."""

ACCEPTANCE: dict[int, tuple[str, str, float, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, title, seconds, detail = ACCEPTANCE[n]
        line = f"{verdict} criterion {n:2d} {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
