import pytest

_CRITERIA: dict[int, list[tuple[str, str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n = report.user_properties and dict(report.user_properties).get("criterion")
    if n:
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA.setdefault(n, []).append((report.nodeid.split("::")[-1], report.outcome, detail))


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_makereport(item, call):
    m = item.get_closest_marker("criterion")
    if m and ("criterion", m.args[0]) not in item.user_properties:
        item.user_properties.append(("criterion", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        parts = _CRITERIA[n]
        ok = all(o == "passed" for _, o, _ in parts)
        tr.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}")
        for name, o, detail in parts:
            tr.write_line(f"    {name}: {o}" + (f"; {detail}" if detail else ""))
