import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "X2/Y1 simulation: bias and coverage of reg, eif, constancy estimators",
    2: "X2/Y2 robustness: linear reg biased, spline EIF unbiased with coverage",
    3: "bounds: Balke-Pearl equals LP oracle, Manski-Pepper transcription and collapse",
    4: "EIF has mean zero under oracle nuisances",
    5: "exact algebraic identities",
    6: "byte-identical reports for repeated (command, seed, inputs)",
    7: "placebo incidence arithmetic and end-to-end synthetic pipeline",
}

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")
    config.addinivalue_line("markers", "slow: long-running test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = re.sub(r".*::", "", report.nodeid)
        _outcomes.setdefault(crit, []).append((name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(CRITERIA):
        results = _outcomes.get(crit)
        if not results:
            continue
        failed = [n for n, o in results if o != "passed"]
        status = "PASS" if not failed else "FAIL"
        line = f"criterion {crit}: {status} - {CRITERIA[crit]} ({len(results) - len(failed)}/{len(results)} checks)"
        if failed:
            line += f"; failing: {', '.join(failed)}"
        tr.write_line(line)
