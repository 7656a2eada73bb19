import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "ran": False, "secs": 0.0,
                                     "note": ""})
    # setup time counts too: session fixtures do the training for some criteria
    entry["secs"] += rep.duration
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False
        entry["note"] = str(rep.longrepr).strip().splitlines()[-1][:120] if rep.longrepr else ""
    if rep.skipped:
        entry["ok"] = False
        entry["note"] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        line = f"criterion {n:>2} {status}  {e['title']}  ({e['secs']:.1f} s)"
        if status == "FAIL" and e["note"]:
            line += f"  -- {e['note']}"
        terminalreporter.write_line(line)
