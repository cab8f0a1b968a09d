import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# number -> list of (status, test name, notes)
_criteria: dict[int, list[tuple[str, str, list[str]]]] = {}
_RANK = {"FAIL": 2, "PASS": 1, "SKIP": 0}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def note(request):
    """Record a measured value; it is printed next to the criterion's pass/fail line."""
    def add(text: str) -> None:
        request.node.user_properties.append(("criterion_note", text))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        notes = [v for k, v in item.user_properties if k == "criterion_note"]
        _criteria.setdefault(int(marker.args[0]), []).append((status, item.name, notes))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        results = _criteria[number]
        worst = max((s for s, _, _ in results), key=_RANK.__getitem__)
        terminalreporter.write_line(f"criterion {number:>2}: {worst}")
        for status, name, notes in results:
            terminalreporter.write_line(f"    {status:<4} {name}")
            for text in notes:
                for line in text.splitlines():
                    terminalreporter.write_line(f"         {line}")
