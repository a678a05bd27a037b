import numpy as np
import pytest
import torch

from aircouple.backbone import ModelConfig
from aircouple.grid import GridSpec
from aircouple.normalize import NormStats
from aircouple.synthworld import WorldConfig, generate_world

TINY_GRID = GridSpec(10, 18)


def tiny_model_config(n_pollutants=3, n_met=4, **kw):
    base = dict(
        n_pollutants=n_pollutants, n_met=n_met, base_width=4, n_hidden_blocks=1, hidden_kernel=3,
        time_embed_dim=8, fusion_hidden=8, fused_channels=4,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_pack():
    return generate_world(WorldConfig(grid=TINY_GRID, n_steps=30, spinup_steps=5, seed=3))


@pytest.fixture(scope="session")
def tiny_stats(tiny_pack):
    return NormStats.fit(tiny_pack)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# acceptance bookkeeping: one summary line per criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and not report.failed and not report.skipped):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "results": [], "details": []})
    entry["results"].append(report.outcome)
    detail = getattr(item, "detail", None)
    if detail and report.when == "call":
        entry["details"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        ok = entry["results"] and all(r == "passed" for r in entry["results"])
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number:2d} {status}  {entry['title']}"
        if entry["details"]:
            line += "  [" + "; ".join(entry["details"]) + "]"
        terminalreporter.write_line(line)
