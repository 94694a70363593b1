import acceptance_harness


def pytest_terminal_summary(terminalreporter):
    if not acceptance_harness.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(acceptance_harness.RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
