import _acceptance_log


def pytest_terminal_summary(terminalreporter):
    lines = _acceptance_log.lines()
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
