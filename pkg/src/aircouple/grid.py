"""Lat-lon grid geometry, variable catalogs and the field tensor type."""

from __future__ import annotations

import dataclasses
import datetime as dt
import math
from typing import Sequence

import numpy as np

from aircouple.errors import ShapeError

SPECIES = ("co", "no", "no2", "so2", "o3")
PM_VARS = ("pm1", "pm2p5", "pm10")
MET_SURFACE = ("t2m", "u10m", "v10m", "msl", "tp")
MET_LEVEL = ("u", "v", "t", "r", "z")
PRESSURE_LEVELS = (50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000)
STATIC_VARS = ("orography", "land_sea_mask", "latitude", "sin_longitude", "cos_longitude")

# Species families treated as photochemically active / spiky by default.
GREYLINE_SPECIES = ("no", "no2", "o3")
SKEW_SPECIES = ("no", "no2", "so2")


@dataclasses.dataclass(frozen=True)
class GridSpec:
    """Endpoint-inclusive latitude rows (90 to -90) and [0, 360) longitudes."""

    n_lat: int
    n_lon: int

    def __post_init__(self):
        if self.n_lat < 2 or self.n_lon < 2:
            raise ValueError(f"grid needs n_lat >= 2 and n_lon >= 2, got {self.n_lat}x{self.n_lon}")
        # 180/(M-1) == 360/N  <=>  N == 2(M-1)
        if self.n_lon != 2 * (self.n_lat - 1):
            raise ValueError(
                f"inconsistent grid {self.n_lat}x{self.n_lon}: "
                f"180/{self.n_lat - 1} != 360/{self.n_lon}"
            )

    @classmethod
    def from_resolution(cls, resolution_deg: float) -> GridSpec:
        n_lon = round(360.0 / resolution_deg)
        if not math.isclose(n_lon * resolution_deg, 360.0, rel_tol=1e-9):
            raise ValueError(f"{resolution_deg} deg does not divide 360")
        return cls(n_lon // 2 + 1, n_lon)

    @property
    def resolution_deg(self) -> float:
        return 180.0 / (self.n_lat - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    def latitudes(self) -> np.ndarray:
        i = np.arange(self.n_lat)
        # integer numerator keeps rows exactly antisymmetric about the equator
        return 90.0 * (self.n_lat - 1 - 2 * i) / (self.n_lat - 1)

    def longitudes(self) -> np.ndarray:
        return 360.0 * np.arange(self.n_lon) / self.n_lon

    def to_dict(self) -> dict:
        return {"n_lat": self.n_lat, "n_lon": self.n_lon, "resolution_deg": self.resolution_deg}

    @classmethod
    def from_dict(cls, d: dict) -> GridSpec:
        spec = cls(int(d["n_lat"]), int(d["n_lon"]))
        if "resolution_deg" in d and not math.isclose(d["resolution_deg"], spec.resolution_deg):
            raise ValueError(f"resolution_deg {d['resolution_deg']} does not match {spec}")
        return spec


FULL_GRID = GridSpec(451, 900)
DESK_GRID = GridSpec(46, 90)


def latitude_of(i: int, spec: GridSpec) -> float:
    if not 0 <= i < spec.n_lat:
        raise IndexError(f"latitude row {i} outside [0, {spec.n_lat})")
    return 90.0 * (spec.n_lat - 1 - 2 * i) / (spec.n_lat - 1)


def latitude_weights(spec: GridSpec) -> np.ndarray:
    """cos(latitude) per row; exactly zero on the pole rows."""
    lat = spec.latitudes()
    w = np.cos(np.radians(lat))
    w[np.abs(lat) == 90.0] = 0.0
    return w


@dataclasses.dataclass(frozen=True)
class VariableCatalog:
    pollutant_vars: tuple[str, ...]
    met_vars: tuple[str, ...]
    static_vars: tuple[str, ...] = STATIC_VARS
    pressure_levels: tuple[int, ...] = ()
    greyline_vars: tuple[str, ...] = ()

    def __post_init__(self):
        for field in ("pollutant_vars", "met_vars", "static_vars", "pressure_levels", "greyline_vars"):
            object.__setattr__(self, field, tuple(getattr(self, field)))
        for field in ("pollutant_vars", "met_vars", "static_vars"):
            names = getattr(self, field)
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate names in {field}")
        extra = set(self.greyline_vars) - set(self.pollutant_vars)
        if extra:
            raise ValueError(f"greyline_vars not in pollutant_vars: {sorted(extra)}")

    @property
    def n_pollutants(self) -> int:
        return len(self.pollutant_vars)

    @property
    def n_met(self) -> int:
        return len(self.met_vars)

    @property
    def n_static(self) -> int:
        return len(self.static_vars)

    def split_level(self, name: str) -> tuple[str, int | None]:
        """'o3_500' -> ('o3', 500); 'tc_co' -> ('tc_co', None)."""
        base, _, tail = name.rpartition("_")
        if base and tail.isdigit() and int(tail) in self.pressure_levels:
            return base, int(tail)
        return name, None

    def species_of(self, name: str) -> str:
        base, _ = self.split_level(name)
        return base[3:] if base.startswith("tc_") else base

    def species_mask(self, species: Sequence[str]) -> tuple[str, ...]:
        return tuple(v for v in self.pollutant_vars if self.species_of(v) in species)

    def greyline_mask(self) -> np.ndarray:
        return np.array([v in self.greyline_vars for v in self.pollutant_vars])

    def to_dict(self) -> dict:
        return {
            "pollutant_vars": list(self.pollutant_vars),
            "met_vars": list(self.met_vars),
            "static_vars": list(self.static_vars),
            "pressure_levels": list(self.pressure_levels),
            "greyline_vars": list(self.greyline_vars),
        }

    @classmethod
    def from_dict(cls, d: dict) -> VariableCatalog:
        return cls(**{k: tuple(v) for k, v in d.items()})


def full_catalog() -> VariableCatalog:
    """73 pollutant channels and 70 meteorological channels on 13 levels."""
    levels = PRESSURE_LEVELS
    pollutants = [f"tc_{s}" for s in SPECIES]
    pollutants += [f"{s}_{lev}" for s in SPECIES for lev in levels]
    pollutants += list(PM_VARS)
    met = list(MET_SURFACE) + [f"{v}_{lev}" for v in MET_LEVEL for lev in levels]
    cat = VariableCatalog(tuple(pollutants), tuple(met), STATIC_VARS, levels)
    return dataclasses.replace(cat, greyline_vars=cat.species_mask(GREYLINE_SPECIES))


def default_skew_vars(catalog: VariableCatalog) -> tuple[str, ...]:
    return catalog.species_mask(SKEW_SPECIES)


def as_utc(t) -> dt.datetime:
    if isinstance(t, str):
        t = dt.datetime.fromisoformat(t.replace("Z", "+00:00"))
    if isinstance(t, np.datetime64):
        t = dt.datetime.fromisoformat(str(t.astype("datetime64[s]")))
    if t.tzinfo is None:
        return t.replace(tzinfo=dt.timezone.utc)
    return t.astimezone(dt.timezone.utc)


def format_time(t: dt.datetime) -> str:
    return as_utc(t).strftime("%Y-%m-%dT%H:%M:%SZ")


class FieldTensor:
    """A timestamped ``n_lat x n_lon x K`` stack of named variables.

    ``values`` is a read-only view; construction never copies unless the
    input is not already an ndarray.
    """

    __slots__ = ("values", "var_names", "valid_time")

    def __init__(self, values, var_names: Sequence[str], valid_time, check_finite=True):
        arr = np.asarray(values)
        if arr.ndim != 3:
            raise ShapeError(f"field must be n_lat x n_lon x K, got shape {arr.shape}")
        names = tuple(var_names)
        if arr.shape[2] != len(names):
            raise ShapeError(f"{arr.shape[2]} channels but {len(names)} names")
        if len(set(names)) != len(names):
            raise ValueError("duplicate channel names")
        if check_finite and not np.all(np.isfinite(arr)):
            raise ValueError("field contains non-finite values")
        view = arr.view()
        view.flags.writeable = False
        object.__setattr__(self, "values", view)
        object.__setattr__(self, "var_names", names)
        object.__setattr__(self, "valid_time", as_utc(valid_time))

    def __setattr__(self, name, value):
        raise AttributeError("FieldTensor is immutable")

    def __repr__(self):
        return f"FieldTensor(shape={self.values.shape}, valid_time={format_time(self.valid_time)})"

    @property
    def shape(self):
        return self.values.shape

    def check_grid(self, spec: GridSpec):
        if self.values.shape[:2] != spec.shape:
            raise ShapeError(f"field grid {self.values.shape[:2]} != {spec.shape}")

    def select(self, names: Sequence[str]) -> FieldTensor:
        idx = [self.var_names.index(n) for n in names]
        return FieldTensor(self.values[:, :, idx], names, self.valid_time, check_finite=False)

    def channel_slice(self, start: int, stop: int) -> FieldTensor:
        return FieldTensor(
            self.values[:, :, start:stop], self.var_names[start:stop], self.valid_time, check_finite=False
        )


def concat_channels(tensors: Sequence[FieldTensor], tags: Sequence[str] | None = None) -> FieldTensor:
    """Stack fields along the channel axis.

    With ``tags``, every channel of input ``n`` is renamed ``name@tags[n]`` so
    repeated variables from different times stay distinguishable. The result
    carries the latest input ``valid_time``.
    """
    if not tensors:
        raise ValueError("nothing to concatenate")
    if tags is not None and len(tags) != len(tensors):
        raise ValueError("need one tag per tensor")
    grid = tensors[0].shape[:2]
    names = []
    for n, t in enumerate(tensors):
        if t.shape[:2] != grid:
            raise ShapeError(f"grid mismatch: {t.shape[:2]} vs {grid}")
        names += [f"{v}@{tags[n]}" for v in t.var_names] if tags is not None else list(t.var_names)
    if len(tensors) == 1 and tags is None:
        return tensors[0]
    values = np.concatenate([t.values for t in tensors], axis=2)
    return FieldTensor(values, names, max(t.valid_time for t in tensors), check_finite=False)
