"""Collects the acceptance outcomes and prints one line per criterion."""
import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).strip().splitlines()[0][:160] if call.excinfo else ""
    verdict = "PASS" if rep.passed else "FAIL"
    if n in _RESULTS:  # parametrized criteria pass only if every case passes
        old_verdict, _, old_detail = _RESULTS[n]
        verdict = "FAIL" if "FAIL" in (old_verdict, verdict) else "PASS"
        detail = "; ".join(d for d in (old_detail, detail) if d)
    _RESULTS[n] = (verdict, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        verdict, title, detail = _RESULTS[n]
        tr.write_line(f"criterion {n:2d} {verdict}  {title}" + (f"  [{detail}]" if detail else ""))
    passed = sum(v[0] == "PASS" for v in _RESULTS.values())
    tr.write_line(f"{passed}/{len(_RESULTS)} criteria pass")
