import pytest

CRITERIA = {
    1: "monotonic Gaussian position",
    2: "attention values",
    3: "gradient check",
    4: "attentive stop rule",
    5: "toy convergence",
    6: "pruning schedule",
    7: "multiply accounting",
    8: "sparse/dense equivalence",
    9: "sparse decoder speedup",
    10: "robustness comparison",
    11: "bundle serialization",
}

_results: dict[int, tuple[bool, str]] = {}


class Recorder:
    def __init__(self, number: int):
        self.number = number
        self.details: list[str] = []
        self.ok = True

    def check(self, ok: bool, detail: str) -> bool:
        self.ok &= bool(ok)
        self.details.append(("" if ok else "FAILED ") + detail)
        return bool(ok)

    def verdict(self) -> None:
        failed = [d for d in self.details if d.startswith("FAILED")]
        assert self.ok and self.details, f"criterion {self.number}: " + "; ".join(failed or ["no checks"])


@pytest.fixture
def criterion(request):
    """Per-check outcomes for one acceptance criterion; the test ends with ``verdict()``."""
    marker = request.node.get_closest_marker("criterion")
    rec = Recorder(marker.args[0])
    yield rec
    call = getattr(request.node, "rep_call", None)
    if call is None or call.failed:
        reason = call.longrepr.reprcrash.message if call is not None and hasattr(call.longrepr, "reprcrash") else "error"
        extra = [] if not rec.ok else [f"raised: {reason.splitlines()[0]}"]
        _results[rec.number] = (False, "; ".join(rec.details + extra))
        return
    _results[rec.number] = (rec.ok, "; ".join(rec.details))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.rep_call = report


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _results:
            terminalreporter.write_line(f"criterion {n:2d} [{name}]: NOT RUN")
            continue
        ok, detail = _results[n]
        terminalreporter.write_line(f"criterion {n:2d} [{name}]: {'PASS' if ok else 'FAIL'} | {detail}")
