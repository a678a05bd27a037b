"""Pollutant scale normalization, the skew transform, and met standardization."""

from __future__ import annotations

import dataclasses
import json
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from aircouple.grid import default_skew_vars

SKEW_FLOOR = 1e-8
_SKEW_GAIN = 2.5e4
_LOG10_25 = np.log10(25.0)


def skew_transform(x, floor=SKEW_FLOOR):
    """x + log10(2.5e4 x) / log10(25), with x clamped below at ``floor``."""
    x = np.maximum(np.asarray(x, dtype=np.float64), floor)
    return x + np.log10(x * _SKEW_GAIN) / _LOG10_25


def skew_inverse(y, floor=SKEW_FLOOR, rtol=1e-13, max_iter=100):
    """Invert :func:`skew_transform` by safeguarded Newton iteration in log-space.

    The root is bracketed in ``[floor, max(y, 4e-5)]``: above 4e-5 the log
    term is non-negative so ``x <= y``. Newton steps leaving the bracket fall
    back to bisection (geometric mean). Inputs below ``skew_transform(floor)``
    map to ``floor``.
    """
    y = np.asarray(y, dtype=np.float64)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    lo = np.full(y.shape, np.log(floor))
    hi = np.log(np.maximum(np.maximum(y, 1.0 / _SKEW_GAIN), floor))
    u = 0.5 * (lo + hi)
    slope_log = 1.0 / np.log(25.0)
    for _ in range(max_iter):
        x = np.exp(u)
        g = x + np.log10(x * _SKEW_GAIN) / _LOG10_25 - y
        lo = np.where(g < 0, u, lo)
        hi = np.where(g > 0, u, hi)
        step = g / (x + slope_log)
        u_new = u - step
        outside = (u_new <= lo) | (u_new >= hi)
        u_new = np.where(outside, 0.5 * (lo + hi), u_new)
        done = np.abs(u_new - u) <= rtol
        u = u_new
        if np.all(done | (hi - lo <= rtol)):
            break
    x = np.exp(u)
    x = np.where(y <= skew_transform(floor, floor), floor, x)
    return x[0] if scalar else x


def normalize_pollutant(x, scale):
    return np.asarray(x) / scale


def normalize_met(x, mean, std):
    return (np.asarray(x) - mean) / std


def denormalize_met(z, mean, std):
    return np.asarray(z) * std + mean


def _time_records(arr):
    for t in range(arr.shape[0]):
        yield np.asarray(arr[t], dtype=np.float64)


def compute_pollutant_scales(pack, names: Sequence[str] | None = None) -> np.ndarray:
    """Half the spatial maximum, averaged over time, per pollutant variable.

    Accepts a :class:`GridPack` or a ``T x M x N x C`` array. All-zero
    variables get scale 1.
    """
    arr = pack.pollutants if hasattr(pack, "pollutants") else np.asarray(pack)
    if names is None and hasattr(pack, "catalog"):
        names = pack.catalog.pollutant_vars
    if arr.shape[0] < 1:
        raise ValueError("need at least one time step")
    total = np.zeros(arr.shape[-1])
    for rec in _time_records(arr):
        total += rec.max(axis=(0, 1))
    scale = 0.5 * total / arr.shape[0]
    zero = scale <= 0
    if np.any(zero):
        which = [names[k] for k in np.flatnonzero(zero)] if names is not None else np.flatnonzero(zero).tolist()
        warnings.warn(f"all-zero pollutant variables {which}; using scale 1", stacklevel=2)
        scale = np.where(zero, 1.0, scale)
    return scale


def compute_met_stats(pack) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable mean and std over all times and cells (two-pass, float64)."""
    arr = pack.meteorology if hasattr(pack, "meteorology") else np.asarray(pack)
    count = arr.shape[0] * arr.shape[1] * arr.shape[2]
    mean = sum(rec.sum(axis=(0, 1)) for rec in _time_records(arr)) / count
    var = sum(((rec - mean) ** 2).sum(axis=(0, 1)) for rec in _time_records(arr)) / count
    std = np.sqrt(var)
    return mean, np.where(std > 0, std, 1.0)


@dataclasses.dataclass(frozen=True)
class NormStats:
    pollutant_vars: tuple[str, ...]
    pollutant_scale: np.ndarray
    met_vars: tuple[str, ...]
    met_mean: np.ndarray
    met_std: np.ndarray
    skew_vars: tuple[str, ...] = ()
    skew_floor: float = SKEW_FLOOR

    def __post_init__(self):
        for name in ("pollutant_scale", "met_mean", "met_std"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "pollutant_vars", tuple(self.pollutant_vars))
        object.__setattr__(self, "met_vars", tuple(self.met_vars))
        object.__setattr__(self, "skew_vars", tuple(self.skew_vars))
        if self.pollutant_scale.shape != (len(self.pollutant_vars),):
            raise ValueError("one scale per pollutant variable required")
        if self.met_mean.shape != (len(self.met_vars),) or self.met_std.shape != (len(self.met_vars),):
            raise ValueError("one mean/std per met variable required")
        if np.any(self.pollutant_scale <= 0) or np.any(self.met_std <= 0):
            raise ValueError("scales and stds must be positive")
        if self.skew_floor <= 0:
            raise ValueError("skew_floor must be positive")
        unknown = set(self.skew_vars) - set(self.pollutant_vars)
        if unknown:
            raise ValueError(f"skew_vars not among pollutants: {sorted(unknown)}")

    @classmethod
    def fit(cls, pack, skew_vars: Sequence[str] | None = None, skew_floor=SKEW_FLOOR) -> NormStats:
        catalog = pack.catalog
        if skew_vars is None:
            skew_vars = default_skew_vars(catalog)
        mean, std = compute_met_stats(pack)
        return cls(
            catalog.pollutant_vars, compute_pollutant_scales(pack), catalog.met_vars,
            mean, std, tuple(skew_vars), skew_floor,
        )

    @property
    def skew_mask(self) -> np.ndarray:
        return np.array([v in self.skew_vars for v in self.pollutant_vars])

    def lower_bounds(self) -> np.ndarray:
        """Smallest normalized value per pollutant channel (physical zero)."""
        return np.where(self.skew_mask, skew_transform(0.0, self.skew_floor), 0.0)

    def normalize_pollutants(self, x):
        """Physical ``... x C`` -> scaled (and skewed where configured)."""
        z = np.asarray(x, dtype=np.float64) / self.pollutant_scale
        mask = self.skew_mask
        if mask.any():
            z = z.copy()
            z[..., mask] = skew_transform(z[..., mask], self.skew_floor)
        return z

    def denormalize_pollutants(self, z, clamp=True):
        z = np.asarray(z, dtype=np.float64)
        mask = self.skew_mask
        if mask.any():
            z = z.copy()
            z[..., mask] = skew_inverse(z[..., mask], self.skew_floor)
        x = z * self.pollutant_scale
        return np.maximum(x, 0.0) if clamp else x

    def normalize_met(self, x):
        return normalize_met(np.asarray(x, dtype=np.float64), self.met_mean, self.met_std)

    def denormalize_met(self, z):
        return denormalize_met(np.asarray(z, dtype=np.float64), self.met_mean, self.met_std)

    def to_dict(self) -> dict:
        return {
            "pollutant_vars": list(self.pollutant_vars),
            "pollutant_scale": self.pollutant_scale.tolist(),
            "met_vars": list(self.met_vars),
            "met_mean": self.met_mean.tolist(),
            "met_std": self.met_std.tolist(),
            "skew_vars": list(self.skew_vars),
            "skew_floor": self.skew_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> NormStats:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def normalize_statics(x):
    """Standardize each static channel over the grid (constant channels centred only)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=(0, 1))
    std = x.std(axis=(0, 1))
    return (x - mean) / np.where(std > 0, std, 1.0)
