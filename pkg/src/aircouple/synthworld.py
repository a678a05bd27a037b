"""Synthetic coupled meteorology / pollutant worlds with known dynamics.

Winds and distances are in grid units: ``u_wind`` is eastward columns per
step, ``v_wind`` northward rows per step. Each 12 h step applies, in order,
semi-Lagrangian advection (bilinear, periodic in longitude, reflecting at
the poles) with the mean of the winds at both ends of the step, explicit
5-point diffusion, exponential decay, fixed sources, and daylight
production ``photo_rate * max(0, cos zenith)`` for the photochemical
variables.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from aircouple.dataio import STEP, GridPack
from aircouple.errors import ConfigError
from aircouple.grid import DESK_GRID, STATIC_VARS, GridSpec, VariableCatalog, as_utc

WIND_REGIMES = ("zonal", "rotating", "stochastic-mix")


@dataclasses.dataclass(frozen=True)
class Source:
    lat: float
    lon: float
    strength: float
    var: str
    spread: float = 1.0  # gaussian sigma in cells; 0 puts everything in one cell


@dataclasses.dataclass(frozen=True)
class WorldConfig:
    grid: GridSpec = DESK_GRID
    n_steps: int = 400
    seed: int = 0
    wind_regime: str = "stochastic-mix"
    wind_speed: float = 1.5
    wind_memory: float = 0.7
    n_wind_modes: int = 6
    diffusion_coeff: float = 0.05
    pollutant_vars: tuple[str, ...] = ("co", "so2", "o3")
    decay_rate: tuple[float, ...] = (0.03, 0.1, 0.3)
    sources: tuple[Source, ...] | None = None
    n_random_sources: int = 8
    photo_vars: tuple[str, ...] = ("o3",)
    photo_rate: float = 1.0
    n_noise: int = 2
    initial_amplitude: float = 1.0
    spinup_steps: int = 60
    start_time: str = "2022-06-01T00:00:00Z"

    def __post_init__(self):
        object.__setattr__(self, "pollutant_vars", tuple(self.pollutant_vars))
        object.__setattr__(self, "photo_vars", tuple(self.photo_vars))
        if isinstance(self.decay_rate, (int, float)):
            object.__setattr__(self, "decay_rate", (float(self.decay_rate),) * len(self.pollutant_vars))
        object.__setattr__(self, "decay_rate", tuple(self.decay_rate))
        if self.sources is not None:
            object.__setattr__(
                self, "sources", tuple(s if isinstance(s, Source) else Source(**s) for s in self.sources)
            )
        self.validate()

    def validate(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1", "world.n_steps")
        if self.wind_regime not in WIND_REGIMES:
            raise ConfigError(f"wind_regime must be one of {WIND_REGIMES}", "world.wind_regime")
        if not 0 <= self.diffusion_coeff <= 0.25:
            raise ConfigError("diffusion_coeff must lie in [0, 0.25] for stable explicit stepping",
                              "world.diffusion_coeff")
        if len(self.decay_rate) != len(self.pollutant_vars):
            raise ConfigError("one decay rate per pollutant variable", "world.decay_rate")
        if any(not 0 <= d < 1 for d in self.decay_rate):
            raise ConfigError("decay rates must lie in [0, 1)", "world.decay_rate")
        if not 0 <= self.wind_memory < 1:
            raise ConfigError("wind_memory must lie in [0, 1)", "world.wind_memory")
        unknown = set(self.photo_vars) - set(self.pollutant_vars)
        if unknown:
            raise ConfigError(f"photo_vars not among pollutants: {sorted(unknown)}", "world.photo_vars")
        for s in self.sources or ():
            if s.var not in self.pollutant_vars:
                raise ConfigError(f"source variable {s.var!r} unknown", "world.sources")

    def catalog(self) -> VariableCatalog:
        met = ("u_wind", "v_wind") + tuple(f"noise_{k}" for k in range(self.n_noise))
        return VariableCatalog(self.pollutant_vars, met, STATIC_VARS, (), self.photo_vars)


def solar_zenith_cos(timestamp, lat, lon):
    """Cosine of the solar zenith angle (degrees in, broadcasting over lat/lon).

    Declination from day of year, hour angle from UTC time plus longitude;
    the equation of time is ignored.
    """
    t = as_utc(timestamp)
    doy = t.timetuple().tm_yday
    hours = t.hour + t.minute / 60 + t.second / 3600
    decl = math.radians(23.44) * math.sin(2 * math.pi * (284 + doy) / 365)
    hour_angle = np.radians(15.0 * (hours - 12.0) + np.asarray(lon, dtype=np.float64))
    phi = np.radians(np.asarray(lat, dtype=np.float64))
    return math.sin(decl) * np.sin(phi) + math.cos(decl) * np.cos(phi) * np.cos(hour_angle)


def advect(field, di, dj):
    """Semi-Lagrangian step: value at each cell is read from ``(i - di, j - dj)``.

    ``field`` is ``M x N x K``; ``di``/``dj`` are ``M x N`` displacements in
    rows/columns per step (rows grow southward).
    """
    m, n = field.shape[:2]
    last = m - 1
    rows = np.arange(m)[:, None] - di
    cols = np.arange(n)[None, :] - dj
    rows = np.mod(rows, 2 * last)
    rows = np.where(rows > last, 2 * last - rows, rows)
    i0 = np.minimum(np.floor(rows).astype(int), last - 1)
    fr = (rows - i0)[..., None]
    j0f = np.floor(cols)
    fc = (cols - j0f)[..., None]
    j0 = np.mod(j0f.astype(int), n)
    j1 = (j0 + 1) % n
    i0, j0, j1 = np.broadcast_arrays(i0, j0, j1)
    top = field[i0, j0] * (1 - fc) + field[i0, j1] * fc
    bottom = field[i0 + 1, j0] * (1 - fc) + field[i0 + 1, j1] * fc
    return top * (1 - fr) + bottom * fr


def diffuse(field, kappa):
    if kappa == 0:
        return field
    north = np.concatenate([field[:1], field[:-1]], axis=0)
    south = np.concatenate([field[1:], field[-1:]], axis=0)
    east = np.roll(field, -1, axis=1)
    west = np.roll(field, 1, axis=1)
    return field + kappa * (north + south + east + west - 4 * field)


class _ModeBasis:
    """Streamfunction modes sin(n pi i / L) * {cos, sin}(2 pi m j / N) and their winds."""

    def __init__(self, grid: GridSpec, n_modes: int, rng):
        m, n = grid.shape
        self.L = m - 1
        self.N = n
        i = np.arange(m)[:, None].astype(float)
        j = np.arange(n)[None, :].astype(float)
        self.psi, self.dpsi_di, self.dpsi_dj = [], [], []
        for _ in range(n_modes):
            nn_ = int(rng.integers(1, 4))
            mm = int(rng.integers(1, 5))
            ki, kj = nn_ * math.pi / self.L, 2 * math.pi * mm / n
            norm = 1.0 / max(ki, kj)
            for trig, dtrig in ((np.cos, lambda x: -np.sin(x)), (np.sin, np.cos)):
                self.psi.append(norm * np.sin(ki * i) * trig(kj * j))
                self.dpsi_di.append(norm * ki * np.cos(ki * i) * trig(kj * j))
                self.dpsi_dj.append(norm * kj * np.sin(ki * i) * dtrig(kj * j))
        self.psi = np.array(self.psi)
        self.dpsi_di = np.array(self.dpsi_di)
        self.dpsi_dj = np.array(self.dpsi_dj)
        self.jet = np.sin(math.pi * i / self.L) * np.ones_like(j)

    def winds(self, coeffs, jet_speed):
        """(u east, v north) in cells/step for mode coefficients and jet speed."""
        dj = -np.tensordot(coeffs, self.dpsi_di, axes=1) + jet_speed * self.jet
        di = np.tensordot(coeffs, self.dpsi_dj, axes=1)
        return dj, -di

    def field(self, coeffs):
        return np.tensordot(coeffs, self.psi, axes=1)


def _ar1(x, rho, rng, sigma=1.0):
    return rho * x + math.sqrt(1 - rho * rho) * sigma * rng.standard_normal(np.shape(x))


def _source_field(config: WorldConfig, sources: Sequence[Source]) -> np.ndarray:
    grid = config.grid
    m, n = grid.shape
    lat = grid.latitudes()
    res = grid.resolution_deg
    out = np.zeros((m, n, len(config.pollutant_vars)))
    ii = np.arange(m)[:, None]
    jj = np.arange(n)[None, :]
    for s in sources:
        k = config.pollutant_vars.index(s.var)
        ci = int(np.argmin(np.abs(lat - s.lat)))
        cj = int(round((s.lon % 360.0) / res)) % n
        if s.spread <= 0:
            out[ci, cj, k] += s.strength
            continue
        dj = (jj - cj + n // 2) % n - n // 2
        blob = np.exp(-0.5 * ((ii - ci) ** 2 + dj ** 2) / s.spread ** 2)
        out[:, :, k] += s.strength * blob / blob.sum()
    return out


def random_sources(config: WorldConfig, rng) -> tuple[Source, ...]:
    out = []
    for var in config.pollutant_vars:
        if var in config.photo_vars:
            continue
        for _ in range(config.n_random_sources):
            out.append(Source(
                lat=float(rng.uniform(-60, 60)), lon=float(rng.uniform(0, 360)),
                strength=float(rng.lognormal(2.0, 0.5)), var=var, spread=float(rng.uniform(0.7, 2.0)),
            ))
    return tuple(out)


def _statics(grid: GridSpec, rng) -> np.ndarray:
    basis = _ModeBasis(grid, 5, rng)
    oro = basis.field(rng.standard_normal(len(basis.psi))) ** 2
    oro = oro / (oro.max() or 1.0)
    lsm = (oro > np.median(oro)).astype(float)
    lat = np.broadcast_to(grid.latitudes()[:, None] / 90.0, grid.shape)
    lon = np.radians(np.broadcast_to(grid.longitudes()[None, :], grid.shape))
    return np.stack([oro, lsm, lat, np.sin(lon), np.cos(lon)], axis=-1)


def generate_world(config: WorldConfig) -> GridPack:
    """Run the world forward and return an in-memory pack (deterministic in ``seed``)."""
    rng = np.random.default_rng(config.seed)
    grid = config.grid
    m, n = grid.shape
    n_var = len(config.pollutant_vars)
    lat2d = np.broadcast_to(grid.latitudes()[:, None], grid.shape)
    lon2d = np.broadcast_to(grid.longitudes()[None, :], grid.shape)

    basis = _ModeBasis(grid, config.n_wind_modes, rng)
    n_coef = len(basis.psi)
    rho = config.wind_memory
    # ~equal share of the speed budget per mode and for the jet
    amp = config.wind_speed / math.sqrt(n_coef + 1)
    coeffs = amp * rng.standard_normal(n_coef)
    jet = config.wind_speed * rng.standard_normal() / math.sqrt(2)
    noise_basis = _ModeBasis(grid, 4, rng)
    noise_coeffs = rng.standard_normal((config.n_noise, len(noise_basis.psi)))

    sources = config.sources if config.sources is not None else random_sources(config, rng)
    emission = _source_field(config, sources)
    decay = np.asarray(config.decay_rate)
    photo = np.array([v in config.photo_vars for v in config.pollutant_vars])
    statics = _statics(grid, rng)

    init_basis = _ModeBasis(grid, 4, rng)
    conc = np.stack(
        [config.initial_amplitude * (1 + 0.5 * np.tanh(init_basis.field(rng.standard_normal(len(init_basis.psi)))))
         for _ in range(n_var)], axis=-1,
    )

    def wind_at(step):
        if config.wind_regime == "zonal":
            return np.full(grid.shape, config.wind_speed), np.zeros(grid.shape)
        if config.wind_regime == "rotating":
            # first mode pair turns through a full cycle every 20 steps
            phase = 2 * math.pi * step / 20.0
            c = np.zeros(n_coef)
            c[0], c[1] = math.cos(phase), math.sin(phase)
            return basis.winds(0.5 * config.wind_speed * c, 0.5 * config.wind_speed * math.cos(phase / 3))
        return basis.winds(coeffs, jet)

    start = as_utc(config.start_time)
    total = config.spinup_steps + config.n_steps
    t0 = start - config.spinup_steps * STEP
    u_prev, v_prev = wind_at(0)
    pollutants = np.empty((config.n_steps, m, n, n_var))
    meteorology = np.empty((config.n_steps, m, n, 2 + config.n_noise))
    for step in range(total):
        valid = t0 + step * STEP
        if step > 0:
            if config.wind_regime == "stochastic-mix":
                coeffs = _ar1(coeffs, rho, rng, amp)
                jet = _ar1(jet, rho, rng, config.wind_speed / math.sqrt(2))
            u_now, v_now = wind_at(step)
            dj = 0.5 * (u_prev + u_now)
            di = -0.5 * (v_prev + v_now)
            conc = advect(conc, di, dj)
            conc = diffuse(conc, config.diffusion_coeff)
            conc = conc * (1 - decay)
            conc = conc + emission
            if photo.any():
                light = np.maximum(0.0, solar_zenith_cos(valid, lat2d, lon2d))
                conc[:, :, photo] += config.photo_rate * light[..., None]
            noise_coeffs = _ar1(noise_coeffs, rho, rng)
            u_prev, v_prev = u_now, v_now
        out = step - config.spinup_steps
        if out >= 0:
            pollutants[out] = conc
            meteorology[out, :, :, 0] = u_prev
            meteorology[out, :, :, 1] = v_prev
            for k in range(config.n_noise):
                meteorology[out, :, :, 2 + k] = noise_basis.field(noise_coeffs[k])
    times = [start + k * STEP for k in range(config.n_steps)]
    attrs = {"generator": "synthworld", "seed": config.seed, "wind_regime": config.wind_regime}
    return GridPack.from_arrays(
        grid, config.catalog(), times, np.maximum(pollutants, 0.0), meteorology, statics, attrs=attrs
    )


def split_world(pack: GridPack, n_train: int) -> tuple[GridPack, GridPack]:
    """Split one continuous world into train / test packs by time."""
    if not 3 <= n_train <= len(pack) - 3:
        raise ValueError(f"n_train={n_train} leaves too little data on one side of {len(pack)} steps")
    return pack.subset(0, n_train), pack.subset(n_train, len(pack))

