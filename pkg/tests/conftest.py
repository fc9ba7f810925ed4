"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_OUTCOMES: dict[int, tuple[str, str, str]] = {}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when != "call" and not (report.failed or report.skipped):
        return
    number, text = marker.args
    status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    detail = getattr(item, "criterion_detail", "")
    previous = _OUTCOMES.get(number)
    if previous is None or _RANK[status] > _RANK[previous[0]]:
        _OUTCOMES[number] = (status, text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        status, text, detail = _OUTCOMES[number]
        line = f"criterion {number:>2}: {status}  {text}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def detail(request):
    """Attach a short measured summary to the criterion line."""

    def record(text: str) -> None:
        request.node.criterion_detail = text

    return record
