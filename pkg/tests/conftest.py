from pathlib import Path

import pytest

from epipolicy.epidemic import WorldConfig
from epipolicy.harness import AgentKind, Backend, RunConfig

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def example_response() -> str:
    return (DATA / "example_response.txt").read_text()


@pytest.fixture(scope="session")
def golden_prompt() -> str:
    return (DATA / "week6_world2_knowledge_prompt.txt").read_text()


@pytest.fixture
def scripted_cfg():
    def make(mode="world1", days=365, **kw):
        kw.setdefault("agent_kind", AgentKind.SCRIPTED)
        kw.setdefault("backend", Backend.SCRIPTED)
        return RunConfig(days=days, world=WorldConfig(mode=mode), **kw)
    return make


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): release criterion covered by a test")
    config._criteria = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    results = report.config._criteria if hasattr(report, "config") else None
    if results is None:
        return
    key = props["criterion"]
    if report.when == "call" or report.outcome != "passed":
        outcome = "SKIP" if report.skipped else "PASS" if report.passed else "FAIL"
        if results.get(key, (None, "PASS"))[1] != "FAIL":
            results[key] = (props["title"], outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is not None and not any(k == "criterion" for k, _ in item.user_properties):
        item.user_properties.append(("criterion", marker.args[0]))
        item.user_properties.append(("title", marker.args[1]))
    outcome = yield
    outcome.get_result().config = item.config


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, outcome = results[number]
        terminalreporter.write_line(f"{outcome} criterion {number:2d}: {title}")
