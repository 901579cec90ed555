def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", None) != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion_number"], "PASS" if rep.passed else "FAIL",
                              props["criterion"], props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, verdict, title, detail in sorted(lines):
        terminalreporter.write_line(f"{verdict}  {title}: {detail}")
