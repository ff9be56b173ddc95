import pytest

from sparsemoe.core import PRESETS, generate_fixture

_acceptance: list[tuple[int, str, str]] = []


@pytest.fixture(scope="session")
def tiny_config():
    return PRESETS["tiny"]


@pytest.fixture(scope="session")
def tiny_container(tiny_config):
    return generate_fixture(tiny_config, seed=7)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        _acceptance.append((number, title, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    verdicts: dict[tuple[int, str], bool] = {}
    for number, title, outcome in _acceptance:  # parametrized criteria pass only if every case does
        verdicts[number, title] = verdicts.get((number, title), True) and outcome == "passed"
    for (number, title), ok in sorted(verdicts.items()):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] AC{number:>2} {title}")
