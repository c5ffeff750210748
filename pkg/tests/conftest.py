import numpy as np
import pytest

from parspace import runner

DIRECTIONAL_SCENARIOS = ("medical", "remote_sensing", "radar_shift")
DIRECTIONAL_STRATEGIES = ("decoder", "parser:coeff:conv", "full")
DIRECTIONAL_SEEDS = (0, 1, 2)


def numgrad(f, x, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    """max |a - b| scaled by the larger of the two max magnitudes."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture(scope="session")
def pretrained():
    """Seed-0 checkpoint at the default pretraining budget (shared by the slow tests)."""
    return runner.pretrain(seed=0)


@pytest.fixture(scope="session")
def directional_runs(pretrained):
    """{(scenario, strategy, seed): RunReport} at default fine-tuning settings."""
    out = {}
    for sc in DIRECTIONAL_SCENARIOS:
        for st in DIRECTIONAL_STRATEGIES:
            for seed in DIRECTIONAL_SEEDS:
                out[sc, st, seed] = runner.finetune(
                    pretrained.model, runner.RunConfig(strategy=st, scenario=sc, seed=seed))
    return out


# ----------------------------------------------- acceptance summary lines

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.passed and rep.when != "call"):
        return
    number, title = mark.args
    ok, _, details = _criteria.get(number, (True, title, []))
    details = details + [str(v) for k, v in item.user_properties if k == "detail" and str(v) not in details]
    _criteria[number] = (ok and rep.passed, title, details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        ok, title, details = _criteria[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{'; '.join(details)}]" if details else ""))
