ACCEPTANCE_LINES: dict[str, str] = {}


def record(name: str, ok: bool, detail: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES[name] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES.values():
        terminalreporter.write_line(line)
