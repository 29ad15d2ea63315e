import os
import sys

sys.path.insert(0, os.path.dirname(__file__))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit, passed, detail in sorted(mod.RESULTS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {crit}: {detail}")
