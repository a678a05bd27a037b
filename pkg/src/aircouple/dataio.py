"""GridPack: a directory holding ``manifest.json`` plus raw float32 arrays.

Layout of each array file is time-major, then row-major lat x lon, then
channel-last, little-endian float32::

    pollutants.f32   T x M x N x C
    meteorology.f32  T x M x N x D
    statics.f32      M x N x S      (single time-invariant record)

Manifest keys: ``format`` ("gridpack"), ``version``, ``grid``, ``catalog``,
``times`` (ISO-8601 UTC, 12 h apart), ``dtype``, ``byte_order``, ``layout``,
``arrays`` (file name and shape per array) and free-form ``attrs``.
"""

from __future__ import annotations

import datetime as dt
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from aircouple.errors import FormatError, IntegrityError, ShapeError
from aircouple.grid import FieldTensor, GridSpec, VariableCatalog, as_utc, format_time

FORMAT_NAME = "gridpack"
FORMAT_VERSION = 1
STEP = dt.timedelta(hours=12)
DTYPE = np.dtype("<f4")
LAYOUT = "time-major, then row-major lat x lon, then channel-last"
ARRAY_FILES = {"pollutants": "pollutants.f32", "meteorology": "meteorology.f32", "statics": "statics.f32"}


def check_times(times: Sequence[dt.datetime]) -> tuple[dt.datetime, ...]:
    times = tuple(as_utc(t) for t in times)
    if not times:
        raise FormatError("a pack needs at least one time step")
    for a, b in zip(times, times[1:]):
        if b - a != STEP:
            raise FormatError(f"times must be 12 h apart: {format_time(a)} -> {format_time(b)}")
    return times


class GridPack:
    """Pollutant, meteorology and static arrays on one grid and catalog.

    Arrays may be in-memory ndarrays or read-only memmaps; indexing a memmap
    by time only touches the requested records.
    """

    def __init__(self, grid, catalog, times, pollutants, meteorology, statics, attrs=None, path=None):
        self.grid: GridSpec = grid
        self.catalog: VariableCatalog = catalog
        self.times = check_times(times)
        self.pollutants = pollutants
        self.meteorology = meteorology
        self.statics = statics
        self.attrs = dict(attrs or {})
        self.path = path
        self._validate_shapes()

    @classmethod
    def from_arrays(cls, grid, catalog, times, pollutants, meteorology, statics, attrs=None) -> GridPack:
        """Build an in-memory pack, casting to float32 and checking values."""
        arrays = [np.ascontiguousarray(a, dtype=DTYPE) for a in (pollutants, meteorology, statics)]
        for name, a in zip(ARRAY_FILES, arrays):
            if not np.all(np.isfinite(a)):
                raise FormatError(f"{name} contains non-finite values")
        if np.any(arrays[0] < 0):
            raise FormatError("pollutant values must be >= 0")
        return cls(grid, catalog, times, *arrays, attrs=attrs)

    def _validate_shapes(self):
        m, n = self.grid.shape
        t = len(self.times)
        expect = {
            "pollutants": (t, m, n, self.catalog.n_pollutants),
            "meteorology": (t, m, n, self.catalog.n_met),
            "statics": (m, n, self.catalog.n_static),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if tuple(got) != shape:
                raise ShapeError(f"{name} has shape {tuple(got)}, expected {shape}")

    def __len__(self):
        return len(self.times)

    def __repr__(self):
        return f"GridPack(grid={self.grid.shape}, times={len(self)}, path={self.path})"

    def pollutant_field(self, t: int) -> FieldTensor:
        return FieldTensor(np.array(self.pollutants[t]), self.catalog.pollutant_vars, self.times[t])

    def met_field(self, t: int) -> FieldTensor:
        return FieldTensor(np.array(self.meteorology[t]), self.catalog.met_vars, self.times[t])

    def static_field(self) -> FieldTensor:
        return FieldTensor(np.array(self.statics), self.catalog.static_vars, self.times[0])

    def time_index(self, t) -> int:
        try:
            return self.times.index(as_utc(t))
        except ValueError:
            raise KeyError(f"{format_time(t)} not in pack") from None

    def subset(self, start: int, stop: int) -> GridPack:
        """Contiguous time range as a new pack sharing the static record."""
        return GridPack(
            self.grid, self.catalog, self.times[start:stop], self.pollutants[start:stop],
            self.meteorology[start:stop], self.statics, attrs=self.attrs,
        )

    def manifest(self) -> dict:
        m, n = self.grid.shape
        t = len(self.times)
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "grid": self.grid.to_dict(),
            "catalog": self.catalog.to_dict(),
            "times": [format_time(x) for x in self.times],
            "dtype": "float32",
            "byte_order": "little-endian",
            "layout": LAYOUT,
            "arrays": {
                "pollutants": {"file": ARRAY_FILES["pollutants"], "shape": [t, m, n, self.catalog.n_pollutants]},
                "meteorology": {"file": ARRAY_FILES["meteorology"], "shape": [t, m, n, self.catalog.n_met]},
                "statics": {"file": ARRAY_FILES["statics"], "shape": [m, n, self.catalog.n_static]},
            },
            "attrs": self.attrs,
        }


def write_pack(pack: GridPack, path, overwrite=False) -> GridPack:
    """Write ``pack`` atomically (temp dir in the same parent, then rename)."""
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        for name, fname in ARRAY_FILES.items():
            arr = np.ascontiguousarray(getattr(pack, name), dtype=DTYPE)
            arr.tofile(tmp / fname)
        with open(tmp / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(pack.manifest(), f, indent=1)
        if path.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{path.name}.old.", dir=path.parent))
            os.replace(path, old / "pack")
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return read_pack(path)


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json in {path}")
    with open(mpath, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{mpath}: not a gridpack manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{mpath}: unsupported version {manifest.get('version')}")
    if manifest.get("dtype") != "float32" or manifest.get("byte_order") != "little-endian":
        raise FormatError(f"{mpath}: only little-endian float32 is supported")
    return manifest


def read_pack(path) -> GridPack:
    """Open a pack with memory-mapped arrays after checking every file size."""
    path = Path(path)
    manifest = read_manifest(path)
    grid = GridSpec.from_dict(manifest["grid"])
    catalog = VariableCatalog.from_dict(manifest["catalog"])
    arrays = {}
    for name in ARRAY_FILES:
        entry = manifest["arrays"][name]
        shape = tuple(entry["shape"])
        fpath = path / entry["file"]
        expected = int(np.prod(shape)) * DTYPE.itemsize
        if not fpath.is_file():
            raise IntegrityError(f"{fpath}: missing (expected {expected} bytes)")
        actual = fpath.stat().st_size
        if actual != expected:
            raise IntegrityError(f"{fpath}: {actual} bytes on disk, expected {expected}")
        if expected == 0:
            arrays[name] = np.zeros(shape, dtype=DTYPE)
        else:
            arrays[name] = np.memmap(fpath, dtype=DTYPE, mode="r", shape=shape)
    return GridPack(
        grid, catalog, manifest["times"], arrays["pollutants"], arrays["meteorology"],
        arrays["statics"], attrs=manifest.get("attrs"), path=path,
    )


def slice_window(pack: GridPack, t_index: int):
    """The five fields of one training sample around ``t_index``.

    Returns ``(P[t-1], P[t], Q[t], Q[t+1], P[t+1])``; the last is the target.
    """
    n = len(pack)
    if not 1 <= t_index <= n - 2:
        raise IndexError(f"window index {t_index} outside [1, {n - 2}]")
    return (
        pack.pollutant_field(t_index - 1),
        pack.pollutant_field(t_index),
        pack.met_field(t_index),
        pack.met_field(t_index + 1),
        pack.pollutant_field(t_index + 1),
    )
