"""Terminal summary: one PASS/FAIL line per numbered acceptance criterion."""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for status, reports in terminalreporter.stats.items():
        for rep in reports:
            nodeid = getattr(rep, "nodeid", "")
            match = _CRITERION.search(nodeid)
            if match is None:
                continue
            num = int(match.group(1))
            if status == "passed":
                verdicts.setdefault(num, "PASS")
            elif status in ("failed", "error"):
                verdicts[num] = "FAIL"
            elif status == "skipped":
                verdicts.setdefault(num, "SKIP")
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(verdicts):
        terminalreporter.write_line(f"acceptance criterion {num}: {verdicts[num]}")
