"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
import pytest

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion exercised by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    if call.when == "setup" and call.excinfo is None:
        return
    cid = str(marker.args[0])
    if call.excinfo is None:
        outcome = "PASS"
    elif call.excinfo.errisinstance(pytest.skip.Exception):
        outcome = "SKIP"
    else:
        outcome = "FAIL"
    notes = [v for k, v in item.user_properties if k == "note"]
    _OUTCOMES.setdefault(cid, []).append((item.name, outcome, notes, str(call.excinfo.value) if outcome == "SKIP" else ""))


def _key(cid):
    head = "".join(ch for ch in cid if ch.isdigit())
    return int(head or 0), cid


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_OUTCOMES, key=_key):
        rows = _OUTCOMES[cid]
        states = {o for _, o, _, _ in rows}
        overall = "FAIL" if "FAIL" in states else ("PASS" if "PASS" in states else "SKIP")
        if overall == "PASS" and "SKIP" in states:
            overall = "PASS (partial: some checks skipped)"
        detail = "; ".join(f"{name}={o}" for name, o, _, _ in rows)
        terminalreporter.write_line(f"criterion {cid}: {overall}  ({detail})")
        for name, o, notes, why in rows:
            for note in notes:
                terminalreporter.write_line(f"    {name}: {note}")
            if why:
                terminalreporter.write_line(f"    {name}: {why}")
