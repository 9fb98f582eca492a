"""Shared pytest hooks: print the acceptance scorecard after the run."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = (sys.modules.get("test_acceptance")
           or sys.modules.get("tests.test_acceptance"))
    verdicts = getattr(mod, "VERDICTS", None) if mod else None
    if verdicts:
        terminalreporter.section("acceptance scorecard")
        for line in verdicts:
            terminalreporter.write_line(line)
