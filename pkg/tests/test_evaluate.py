import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aircouple.dataio import STEP, GridPack
from aircouple.errors import ShapeError
from aircouple.evaluate import (
    EvalReport, evaluate_forecasts, export_map, normalized_rmse, persistence_report, read_scorecard, row_label,
    scorecard, weighted_rmse,
)
from aircouple.grid import GridSpec, latitude_weights

GRID = GridSpec(10, 18)
W = latitude_weights(GRID)


def test_weighted_rmse_examples(rng):
    truth = rng.standard_normal((10, 18, 2))
    assert np.all(weighted_rmse(truth, truth, W) == 0)
    assert np.allclose(weighted_rmse(truth + 2.0, truth, W), 2.0)
    poles = truth.copy()
    poles[[0, -1]] += 5.0
    assert np.all(weighted_rmse(poles, truth, W) == 0)
    with pytest.raises(ValueError):
        weighted_rmse(np.zeros((0, 18)), np.zeros((0, 18)), np.zeros(0))
    with pytest.raises(ShapeError):
        weighted_rmse(truth, truth[..., :1], W)


def test_weighted_rmse_direct_formula(rng):
    a, b = rng.standard_normal((10, 18)), rng.standard_normal((10, 18))
    num = sum(W[i] * (a[i, j] - b[i, j]) ** 2 for i in range(10) for j in range(18))
    den = sum(W[i] for i in range(10) for j in range(18))
    assert weighted_rmse(a, b, W) == pytest.approx(math.sqrt(num / den), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 17), st.integers(0, 2**31))
def test_weighted_rmse_roll_invariant(shift, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((10, 18, 2)), rng.standard_normal((10, 18, 2))
    assert np.allclose(weighted_rmse(a, b, W), weighted_rmse(np.roll(a, shift, 1), np.roll(b, shift, 1), W))


def report(rmse, baseline=None, names=("a", "b"), leads=(12, 24)):
    return EvalReport(names, leads, np.asarray(rmse, float), None if baseline is None else np.asarray(baseline, float))


def test_normalized_rmse_examples():
    x = report([[1.0, 2.0], [3.0, 4.0]])
    assert np.all(normalized_rmse(x, x) == 1)
    assert np.all(normalized_rmse(report(np.zeros((2, 2))), x) == 0)
    assert normalized_rmse(1.7, 2.0) == pytest.approx(0.85)
    assert normalized_rmse(1.0, 0.0) == np.inf
    assert normalized_rmse(0.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        normalized_rmse(x, report([[1.0], [1.0]], leads=(12,)))


def test_scorecard_all_ones(tmp_path):
    r = report(np.ones((2, 2)), np.ones((2, 2)), leads=(24, 48))
    card = scorecard(r, tmp_path / "s.csv")
    assert np.all(card.cells == 1.0)
    assert card.better_fraction == {1: 0.0, 2: 0.0}
    assert card.summary_lines()[0] == "day 1: 0% of variables better than baseline"


def test_scorecard_ninety_one_percent():
    names = [f"v{k}" for k in range(100)]
    ratios = np.where(np.arange(100) < 91, 0.9, 1.1)[:, None]
    r = EvalReport(names, [120], ratios, np.ones((100, 1)))
    card = scorecard(r)
    assert card.better_fraction[5] == pytest.approx(0.91)
    assert "day 5: 91% of variables better than baseline" in card.summary_lines()


def test_scorecard_toy_csv(tmp_path):
    # three variables, two lead days (two 12 h leads per day, averaged)
    rmse = np.array([[1, 2, 3, 4], [2, 2, 2, 2], [0.5, 0.5, 3, 1]], float)
    base = np.full((3, 4), 2.0)
    r = EvalReport(("co_500", "so2_850", "tc_o3"), (12, 24, 36, 48), rmse, base, (500, 850))
    card = scorecard(r, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "variable,day1,day2"
    assert lines[1] == "co@500,0.75,1.75"
    assert lines[2] == "so2@850,1.0,1.0"
    assert lines[3] == "tc_o3,0.25,1.0"
    assert card.better_fraction == {1: pytest.approx(2 / 3), 2: 0.0}
    rows, days, cells = read_scorecard(tmp_path / "s.csv")
    assert rows == card.rows and days == card.days and np.array_equal(cells, card.cells)
    summary = (tmp_path / "s_summary.csv").read_text().splitlines()
    assert summary[0] == "day,better_fraction"


def test_scorecard_missing_cells(tmp_path):
    rmse = np.array([[1.0, np.nan], [1.0, 1.0]])
    r = EvalReport(("a", "b"), (24, 48), rmse, np.ones((2, 2)))
    with pytest.warns(UserWarning, match="missing"):
        scorecard(r, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[1] == "a,1.0,"
    rows, days, cells = read_scorecard(tmp_path / "s.csv")
    assert np.isnan(cells[0, 1])


def test_scorecard_png(tmp_path):
    r = report(np.ones((2, 2)), np.full((2, 2), 2.0))
    scorecard(r, tmp_path / "s.csv", png=tmp_path / "s.png")
    assert (tmp_path / "s.png").read_bytes()[:4] == b"\x89PNG"


def test_scorecard_requires_baseline():
    with pytest.raises(ValueError):
        scorecard(report(np.ones((2, 2))))


def test_row_label():
    assert row_label("o3_500", (500,)) == "o3@500"
    assert row_label("tc_co", (500,)) == "tc_co"
    assert row_label("noise_0", ()) == "noise_0"


def test_report_json_round_trip(tmp_path):
    r = report([[1.0, np.nan], [3.0, 4.0]], [[2.0, 2.0], [0.0, 4.0]])
    r.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.variables == r.variables and back.lead_hours == r.lead_hours
    assert np.array_equal(back.rmse, r.rmse, equal_nan=True)
    assert back.normalized[1, 0] == np.inf


def test_export_map(tmp_path, rng):
    field = rng.standard_normal(GRID.shape)
    full = export_map(field, GRID, (-90, 90, 0, 360), tmp_path / "f.csv")
    assert np.array_equal(full, field)
    one = export_map(field, GRID, (30, 30, 40, 40), tmp_path / "one.csv")
    assert one.shape == (1, 1) and one[0, 0] == field[3, 2]
    sub = export_map(field, GRID, (-20, 20, 60, 120), tmp_path / "s.csv", image_path=tmp_path / "s.png")
    assert np.array_equal(sub, field[4:6, 3:7])
    wrapped = export_map(field, GRID, (10, 10, 340, 20), tmp_path / "w.csv")
    assert np.array_equal(wrapped[0], field[4, [17, 0, 1]])
    text = (tmp_path / "s.csv").read_text().splitlines()
    assert len(text) == 3 and text[1].split(",")[0] == "10.0"
    with pytest.raises(ValueError):
        export_map(field, GRID, (1, 2, 0, 360), tmp_path / "e.csv")


def toy_truth(n=8):
    rng = np.random.default_rng(0)
    from aircouple.grid import VariableCatalog

    cat = VariableCatalog(("a", "b"), ("u",), ())
    t0 = dt.datetime(2022, 1, 1, tzinfo=dt.timezone.utc)
    return GridPack.from_arrays(GRID, cat, [t0 + k * STEP for k in range(n)], rng.random((n, 10, 18, 2)),
                                np.zeros((n, 10, 18, 1)), np.zeros((10, 18, 0)))


def test_evaluate_forecasts_identity_and_persistence():
    truth = toy_truth()
    fc = truth.subset(2, 5)
    fc.attrs["init_time"] = truth.times[1].isoformat()
    rep = evaluate_forecasts([fc], truth)
    assert rep.lead_hours == (12, 24, 36) and np.all(rep.rmse == 0)
    pers = persistence_report([fc], truth)
    w = latitude_weights(GRID)
    expect = weighted_rmse(np.asarray(truth.pollutants[1]), np.asarray(truth.pollutants[3]), w)
    assert np.allclose(pers.rmse[:, 1], expect)
    assert np.all(rep.with_baseline(pers).normalized == 0)


def test_evaluate_averages_per_init_rmse():
    truth = toy_truth()
    w = latitude_weights(GRID)
    fcs = []
    for init in (1, 3):
        f = truth.subset(init + 1, init + 2)
        vals = np.asarray(truth.pollutants[init + 1]) + init
        fcs.append(GridPack(GRID, truth.catalog, f.times, vals[None], f.meteorology, f.statics,
                            attrs={"init_time": truth.times[init].isoformat()}))
    rep = evaluate_forecasts(fcs, truth)
    assert rep.n_inits == 2
    assert np.allclose(rep.rmse[:, 0], 2.0)
