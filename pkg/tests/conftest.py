import pytest

_results = {}


@pytest.fixture
def criterion():
    """record(id, title, ok, detail): collects one outcome for the acceptance summary."""
    def record(cid, title, ok, detail=""):
        entry = _results.setdefault(cid, {"title": title, "ok": True, "details": []})
        entry["ok"] = entry["ok"] and bool(ok)
        if detail:
            entry["details"].append(detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_results, key=lambda c: (not c.startswith("AC"), c)):
        r = _results[cid]
        terminalreporter.write_line(f"{'PASS' if r['ok'] else 'FAIL'} {cid} {r['title']}: {'; '.join(r['details'])}")
