from helpers import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, seconds, checks = ACCEPTANCE[number]
        failed = [f"{n} {d}".strip() for n, good, d in checks if not good]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} in {seconds:.1f}s"
        terminalreporter.write_line(line + (f" ({'; '.join(failed)})" if failed else ""))
