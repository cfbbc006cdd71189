import pytest
import torch

# criterion number -> list of (test outcome, detail line)
_ACCEPTANCE: dict[int, list[tuple[str, str]]] = {}
_DETAILS: dict[str, list[str]] = {}
_CRITERION_OF: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")
    torch.set_num_threads(1)


@pytest.fixture
def detail(request):
    """Append a line to the acceptance summary of the running test."""
    lines = _DETAILS.setdefault(request.node.nodeid, [])
    return lines.append


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n = _CRITERION_OF.get(report.nodeid)
    if n is None:
        return
    outcome = "PASS" if report.outcome == "passed" else "FAIL"
    _ACCEPTANCE.setdefault(n, []).append((outcome, report.nodeid))


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERION_OF[item.nodeid] = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        results = _ACCEPTANCE[n]
        status = "PASS" if all(o == "PASS" for o, _ in results) else "FAIL"
        tr.write_line(f"criterion {n}: {status}  ({len(results)} checks)")
        for outcome, nodeid in results:
            for line in _DETAILS.get(nodeid, []):
                tr.write_line(f"    {line}")
