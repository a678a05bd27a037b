import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aircouple.normalize import (
    SKEW_FLOOR, NormStats, compute_met_stats, compute_pollutant_scales, denormalize_met, normalize_met,
    normalize_pollutant, normalize_statics, skew_inverse, skew_transform,
)

# x + log10(2.5e4 x) / log10(25) evaluated with mpmath at 40 digits
SKEW_OF_ONE = 4.146014837110089
SKEW_OF_FLOOR = -2.576691385183483


def test_skew_transform_examples():
    assert skew_transform(4e-5) == 4e-5
    assert skew_transform(1e-3) == pytest.approx(1.001, abs=1e-12)
    assert skew_transform(1.0) == pytest.approx(SKEW_OF_ONE, abs=1e-14)
    assert skew_transform(0.0) == pytest.approx(SKEW_OF_FLOOR, abs=1e-14)
    assert skew_transform(-1.0) == skew_transform(SKEW_FLOOR)


def test_skew_inverse_examples():
    assert skew_inverse(4e-5) == pytest.approx(4e-5, rel=1e-12)
    assert skew_inverse(1.001) == pytest.approx(1e-3, rel=1e-12)
    assert skew_inverse(SKEW_OF_ONE) == pytest.approx(1.0, rel=1e-12)
    assert skew_inverse(-10.0) == SKEW_FLOOR


def test_round_trip_random(rng):
    x = np.exp(rng.uniform(np.log(1e-8), np.log(2.0), 1000))
    back = skew_inverse(skew_transform(x))
    assert np.max(np.abs(back - x) / x) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-8, 1e3), st.floats(1e-8, 1e3))
def test_skew_monotone(a, b):
    if a < b:
        assert skew_transform(a) < skew_transform(b)


def test_scales_examples():
    arr = np.zeros((2, 3, 4, 1))
    arr[0, 1, 1, 0], arr[1, 2, 3, 0] = 4.0, 6.0
    assert compute_pollutant_scales(arr)[0] == 2.5
    assert compute_pollutant_scales(np.full((3, 2, 2, 1), 7.0))[0] == 3.5
    single = np.zeros((1, 2, 2, 1))
    single[0, 0, 0, 0] = 10.0
    assert compute_pollutant_scales(single)[0] == 5.0


def test_all_zero_variable_warns():
    with pytest.warns(UserWarning, match="all-zero"):
        scale = compute_pollutant_scales(np.zeros((2, 2, 2, 2)), names=["a", "b"])
    assert np.all(scale == 1.0)


def test_normalize_pollutant_examples():
    assert normalize_pollutant(3.0, 3.0) == 1.0
    assert normalize_pollutant(0.0, 3.0) == 0.0
    assert normalize_pollutant(6.0, 3.0) == 2.0


def test_met_round_trip(rng):
    mean, std = rng.standard_normal(5), rng.uniform(0.5, 3, 5)
    assert np.all(normalize_met(mean, mean, std) == 0)
    assert np.allclose(denormalize_met(np.ones(5), mean, std), mean + std)
    x = rng.standard_normal((100, 5)) * 10
    assert np.max(np.abs(denormalize_met(normalize_met(x, mean, std), mean, std) - x) / np.abs(x)) <= 1e-12


def test_met_stats_match_numpy(rng):
    arr = rng.standard_normal((5, 4, 6, 3)) * [1, 5, 0] + [0, 2, 7]
    mean, std = compute_met_stats(arr)
    assert np.allclose(mean, arr.mean(axis=(0, 1, 2)))
    assert np.allclose(std[:2], arr.std(axis=(0, 1, 2))[:2])
    assert std[2] == 1.0


def test_norm_stats_round_trip(tiny_pack, tmp_path):
    stats = NormStats.fit(tiny_pack)
    assert stats.skew_vars == ("so2",)
    x = np.asarray(tiny_pack.pollutants[3], dtype=np.float64)
    z = stats.normalize_pollutants(x)
    back = stats.denormalize_pollutants(z)
    big = x > 1e-6
    assert np.max(np.abs(back[big] - x[big]) / x[big]) < 1e-9
    assert np.all(z[..., ~stats.skew_mask] >= 0)
    assert np.allclose(stats.lower_bounds(), [0.0, SKEW_OF_FLOOR, 0.0])
    stats.save(tmp_path / "s.json")
    again = NormStats.load(tmp_path / "s.json")
    assert np.array_equal(again.pollutant_scale, stats.pollutant_scale)
    assert again.skew_vars == stats.skew_vars
    with pytest.raises(ValueError):
        NormStats(("a",), np.array([0.0]), (), np.zeros(0), np.zeros(0))


def test_normalized_training_data_mostly_in_range(tiny_pack):
    stats = NormStats.fit(tiny_pack, skew_vars=())
    z = stats.normalize_pollutants(np.asarray(tiny_pack.pollutants))
    assert np.mean((z >= 0) & (z <= 2)) >= 0.99


def test_normalize_statics_standardizes(rng):
    x = rng.standard_normal((6, 10, 3)) * [1, 4, 0] + 5
    z = normalize_statics(x)
    assert np.allclose(z[..., :2].mean(axis=(0, 1)), 0) and np.allclose(z[..., :2].std(axis=(0, 1)), 1)
    assert np.all(z[..., 2] == 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        normalize_statics(np.ones((2, 2, 1)))
