ACCEPTANCE_RESULTS = []


def record_criterion(number, description, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {description}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_RESULTS.append(line)
    print(line, flush=True)
    assert passed, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
