"""Shared pytest wiring: acceptance verdict lines and the global duality-gap tally."""

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    from pathtci.transport import GAP_RECORD

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
    terminalreporter.section("exact transport certificates")
    terminalreporter.write_line(
        f"{GAP_RECORD.solved} exact solves this run, largest |primal - dual| = {GAP_RECORD.max_gap:.3e}"
    )
