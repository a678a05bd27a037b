"""Pollutant base construction, change application and autoregressive rollout."""

from __future__ import annotations

import dataclasses
import datetime as dt
from typing import Mapping, Sequence

import numpy as np
import torch

from aircouple.backbone import time_embed
from aircouple.dataio import STEP, GridPack
from aircouple.errors import HistoryError, ShapeError
from aircouple.grid import FieldTensor, GridSpec, VariableCatalog, as_utc, format_time
from aircouple.normalize import NormStats, normalize_statics

GREYLINE_LAG = dt.timedelta(hours=24)


class StateHistory:
    """Normalized pollutant states keyed by valid time, with a causality guard.

    ``init_time`` is the initial time of the step being predicted; reading a
    state valid after it raises :class:`HistoryError`. Every read is logged
    in ``accessed`` as ``(init_time, valid_time)``.
    """

    def __init__(self, states: Mapping | None = None):
        self._states = {}
        self.init_time = None
        self.accessed = []
        for t, x in (states or {}).items():
            self.put(t, x)

    def put(self, t, x):
        self._states[as_utc(t)] = x

    def get(self, t):
        t = as_utc(t)
        if self.init_time is not None and t > self.init_time:
            raise HistoryError(
                f"state at {format_time(t)} is after the initial time {format_time(self.init_time)}"
            )
        self.accessed.append((self.init_time, t))
        try:
            return self._states[t]
        except KeyError:
            raise HistoryError(f"no pollutant state at {format_time(t)}") from None

    def __contains__(self, t):
        return as_utc(t) in self._states

    def times(self):
        return sorted(self._states)


@dataclasses.dataclass(frozen=True)
class PollutantBase:
    values: object  # torch tensor or ndarray, channel axis -3 (torch) or -1 (numpy)
    source_times: tuple[dt.datetime, ...]


def build_base(history: StateHistory, forecast_time, greyline: Sequence[bool], channel_axis=-3) -> PollutantBase:
    """Grey-line variables from 24 h before ``forecast_time``, others from the step's initial time."""
    forecast_time = as_utc(forecast_time)
    init_time = forecast_time - STEP
    history.init_time = init_time
    greyline = np.asarray(greyline, dtype=bool)
    recent = history.get(init_time)
    sources = [forecast_time - GREYLINE_LAG if g else init_time for g in greyline]
    if not greyline.any():
        return PollutantBase(recent, tuple(sources))
    lagged = history.get(forecast_time - GREYLINE_LAG)
    if recent.shape != lagged.shape:
        raise ShapeError(f"history states differ in shape: {tuple(recent.shape)} vs {tuple(lagged.shape)}")
    shape = [1] * recent.ndim
    shape[channel_axis] = len(greyline)
    if isinstance(recent, torch.Tensor):
        mask = torch.as_tensor(greyline, device=recent.device).reshape(shape)
        values = torch.where(mask, lagged, recent)
    else:
        values = np.where(greyline.reshape(shape), lagged, recent)
    return PollutantBase(values, tuple(sources))


def apply_changes(psi, delta, base):
    """Forecast = psi * base + delta, elementwise."""
    if psi.shape != base.shape or delta.shape != base.shape:
        raise ShapeError(f"psi {tuple(psi.shape)}, delta {tuple(delta.shape)}, base {tuple(base.shape)} differ")
    return psi * base + delta


@dataclasses.dataclass
class StepOutput:
    prediction: torch.Tensor  # unclamped, as seen by the loss
    state: torch.Tensor  # clamped to the physical lower bound, fed back
    base: PollutantBase


def rollout_normalized(
    model, p_prev, p_now, statics, met, init_time, steps, greyline, lower, use_met=True, history=None,
):
    """Differentiable rollout in normalized space on ``B x C x M x N`` tensors.

    ``met`` holds ``Q^t ... Q^{t+steps}`` (``steps + 1`` tensors) and
    ``init_time`` is the valid time of ``p_now``, or one time per sample (the
    history is then keyed by the first). ``lower`` is the per-channel
    normalized value of zero concentration; fed-back states are clamped to it.
    """
    if len(met) < steps + 1:
        raise ValueError(f"need {steps + 1} meteorology states for {steps} steps, got {len(met)}")
    if isinstance(init_time, (list, tuple)):
        sample_times = [as_utc(t) for t in init_time]
    else:
        sample_times = [as_utc(init_time)] * p_now.shape[0]
    if len(sample_times) != p_now.shape[0]:
        raise ValueError("one initial time per sample required")
    init_time = sample_times[0]
    if history is None:
        history = StateHistory()
    history.put(init_time - STEP, p_prev)
    history.put(init_time, p_now)
    floor = torch.as_tensor(lower, dtype=p_now.dtype, device=p_now.device)[:, None, None]
    outputs = []
    for k in range(1, steps + 1):
        t_k = init_time + k * STEP
        base = build_base(history, t_k, greyline)
        p_in = torch.cat([history.get(t_k - 2 * STEP), history.get(t_k - STEP), statics], dim=1)
        q_in = torch.cat([met[k - 1], met[k]], dim=1)
        if not use_met:
            q_in = torch.zeros_like(q_in)
        emb = torch.as_tensor(
            np.stack([time_embed(t + (k - 1) * STEP, model.config.angular_factor) for t in sample_times]),
            dtype=p_now.dtype, device=p_now.device,
        )
        psi, delta = model(p_in, q_in, emb)
        pred = apply_changes(psi, delta, base.values)
        state = torch.maximum(pred, floor)
        history.init_time = None
        history.put(t_k, state)
        outputs.append(StepOutput(pred, state, base))
    return outputs


def _to_tensor(arr, dtype):
    """``M x N x K`` ndarray -> ``1 x K x M x N`` tensor."""
    return torch.as_tensor(np.ascontiguousarray(np.moveaxis(arr, -1, 0)), dtype=dtype)[None]


def _check_times(fields: Sequence[FieldTensor], start, what):
    for k, f in enumerate(fields):
        if f.valid_time != start + k * STEP:
            raise ValueError(f"{what}[{k}] valid at {format_time(f.valid_time)}, expected "
                             f"{format_time(start + k * STEP)}")


def rollout(model, p_prev: FieldTensor, p_now: FieldTensor, q_now: FieldTensor, met_seq: Sequence[FieldTensor],
            steps: int, stats: NormStats, catalog: VariableCatalog, statics: FieldTensor, use_met=True,
            history=None) -> list[FieldTensor]:
    """Forecast ``steps`` 12-hourly states from physical-unit inputs.

    ``met_seq`` holds ``Q^{t+1} ... Q^{t+steps}``; ``q_now`` is ``Q^t``.
    Outputs are physical, non-negative fields valid at ``t+1 ... t+steps``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if len(met_seq) < steps:
        raise ValueError(f"met_seq has {len(met_seq)} states, {steps} steps requested")
    t0 = p_now.valid_time
    _check_times([p_prev, p_now], t0 - STEP, "pollutants")
    _check_times([q_now, *met_seq[:steps]], t0, "meteorology")
    dtype = next(model.parameters()).dtype
    p_vars, m_vars = catalog.pollutant_vars, catalog.met_vars
    norm_p = [_to_tensor(stats.normalize_pollutants(f.select(p_vars).values), dtype) for f in (p_prev, p_now)]
    met = [_to_tensor(stats.normalize_met(f.select(m_vars).values), dtype) for f in [q_now, *met_seq[:steps]]]
    stat = _to_tensor(normalize_statics(statics.select(catalog.static_vars).values), dtype)
    with torch.no_grad():
        outputs = rollout_normalized(
            model, norm_p[0], norm_p[1], stat, met, t0, steps, catalog.greyline_mask(),
            stats.lower_bounds(), use_met=use_met, history=history,
        )
    result = []
    for k, out in enumerate(outputs, start=1):
        z = np.moveaxis(out.state[0].double().numpy(), 0, -1)
        result.append(FieldTensor(stats.denormalize_pollutants(z), p_vars, t0 + k * STEP))
    return result


def rollout_from_pack(model, pack: GridPack, t_index: int, steps: int, stats: NormStats, use_met=True, history=None):
    """Forecast from initial index ``t_index`` of ``pack`` using its meteorology."""
    if not 1 <= t_index <= len(pack) - 1 - steps:
        raise IndexError(f"initial index {t_index} needs {steps} following records in a {len(pack)}-step pack")
    return rollout(
        model, pack.pollutant_field(t_index - 1), pack.pollutant_field(t_index), pack.met_field(t_index),
        [pack.met_field(t_index + k) for k in range(1, steps + 1)], steps, stats, pack.catalog,
        pack.static_field(), use_met=use_met, history=history,
    )


def forecast_pack(forecasts: Sequence[FieldTensor], met_seq: Sequence[FieldTensor], statics: FieldTensor,
                  grid: GridSpec, catalog: VariableCatalog, init_time, attrs=None) -> GridPack:
    """Lead-time-indexed forecast records plus the meteorology that drove them."""
    init_time = as_utc(init_time)
    extra = dict(attrs or {})
    extra.update({
        "kind": "forecast",
        "init_time": format_time(init_time),
        "lead_hours": [int((f.valid_time - init_time).total_seconds() // 3600) for f in forecasts],
    })
    return GridPack.from_arrays(
        grid, catalog, [f.valid_time for f in forecasts],
        np.stack([f.values for f in forecasts]), np.stack([q.values for q in met_seq[:len(forecasts)]]),
        statics.values, attrs=extra,
    )
