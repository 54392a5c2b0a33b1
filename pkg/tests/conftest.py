import numpy as np
import pytest

from icsc_offload.model import CostModel, LinkState, RsuBudget, Scenario, TaskProfile
from icsc_offload.scenario import ScenarioSpec, build_scenario


@pytest.fixture
def default_scenario():
    return build_scenario(ScenarioSpec(seed=0))


def make_scenario(n=2, seed=0, **cost_kw):
    """Small random scenario with heterogeneous tasks and channels."""
    rng = np.random.default_rng(seed)
    tasks, links = [], []
    for _ in range(n):
        b = rng.uniform(1e7, 3e7)
        tasks.append(TaskProfile(t_max=0.1, c=rng.uniform(5e6, 1.5e7), b=b, s_instr=1e3,
                                 b_instr=0.2 * b, f_local=1e9))
        links.append(LinkState(g=rng.uniform(1e-13, 1e-11), sigma2=4e-14, p_max=0.3))
    costs = dict(e1=1.0, e2=1e-25, mu1=1e-7, mu2=1e-8)
    costs.update(cost_kw)
    return Scenario(tasks, links, RsuBudget(40e6, 1e12), CostModel(**costs))


# ------------------------------------------------------ acceptance summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, label): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, label = mark.args
    entry = _CRITERIA.setdefault(n, {"label": label, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]
    if rep.failed and rep.when == "call":
        entry["details"].append(f"FAILED {item.name}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n} ({e['label']}): {'PASS' if e['ok'] else 'FAIL'}"
        if e["details"]:
            line += " | " + "; ".join(e["details"])
        terminalreporter.write_line(line)
