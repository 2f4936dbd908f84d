import pytest
from hypothesis import HealthCheck, settings

# every property suite runs at least this many cases
PROPERTY_CASES = 1000

settings.register_profile(
    "property",
    max_examples=PROPERTY_CASES,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
    derandomize=True,
)

CRITERIA = {
    1: "oracle equivalence of conv/FC kernels",
    2: "baseline vs streamed bit-equality on the toy network",
    3: "core-count independence",
    4: "speedup band on deep vs short streams",
    5: "FPU utilization bands",
    6: "FP8 vs FP16 ratio and unpack attribution",
    7: "footprint formulas and CSR/AER reduction",
    8: "tiling invariance and double-buffer law",
    9: "property suites at >= 1000 cases",
}

_results: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "property: hypothesis property suite")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for mark in report.user_properties:
        if mark[0] == "criterion":
            _results.setdefault(mark[1], []).append(report.outcome)


@pytest.fixture(autouse=True)
def _tag_criterion(request):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        request.node.user_properties.append(("criterion", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, desc in CRITERIA.items():
        outcomes = _results.get(n)
        if outcomes is None:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {desc}")


def is_property_test(fn) -> bool:
    return getattr(fn, "is_hypothesis_test", False)


def pytest_collection_modifyitems(items):
    for item in items:
        if is_property_test(getattr(item, "obj", None)):
            item.add_marker(pytest.mark.property)
