"""Reporting for the acceptance suite: one PASS/FAIL line per criterion."""
import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")
    config.addinivalue_line("markers", "slow: long-running training runs")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            number, title = marker.args
            item.user_properties.append(("criterion", (number, title)))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, title = props["criterion"]
    if report.when == "call" or report.failed or report.skipped:
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        previous = _results.get(number)
        if previous is None or previous[1] == "PASS":
            _results[number] = (title, status, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status, detail = _results[number]
        line = f"criterion {number:>2} {status}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def detail(record_property):
    """Attach a short measurement summary to the criterion's report line."""
    parts = []

    def add(text):
        parts.append(text)
        record_property("detail", "; ".join(parts))

    return add
