"""Base-normalized latitude-weighted loss, LR schedule and training stages."""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from aircouple.backbone import ForecastModel, save_checkpoint
from aircouple.dataio import GridPack
from aircouple.errors import TrainingError
from aircouple.forecast import rollout_normalized
from aircouple.grid import latitude_weights
from aircouple.normalize import NormStats, normalize_statics

log = logging.getLogger(__name__)

BASE_ERROR_FLOOR = 1e-8
STAGES = ("pretrain", "finetune", "multistep")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    max_lr: float = 2.5e-4
    lr_start: float = 1e-8
    lr_floor: float = 1e-9
    warmup_fraction: float = 1 / 3
    epochs: int = 40
    rollout_steps: int = 1
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-4
    seed: int = 0
    use_met: bool = True
    max_windows: int | None = None  # cap on windows per epoch (desk-scale runs)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if not self.lr_floor < self.lr_start < self.max_lr:
            raise ValueError("need lr_floor < lr_start < max_lr")
        if self.rollout_steps < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("rollout_steps, epochs and batch_size must be >= 1")

    @classmethod
    def for_stage(cls, stage, **overrides) -> TrainConfig:
        presets = {
            "pretrain": dict(max_lr=2.5e-4, epochs=40, rollout_steps=1),
            "finetune": dict(max_lr=1e-5, epochs=100, rollout_steps=1),
            "multistep": dict(max_lr=1e-5, epochs=20, rollout_steps=4),
        }
        return cls(stage=stage, **{**presets[stage], **overrides})


def per_variable_base_error(base, target, w, floor=BASE_ERROR_FLOOR):
    """Latitude-weighted L1 distance of base to target per sample and variable.

    Tensors are ``... x C x M x N``; ``w`` has length M. Floored at ``floor``.
    """
    w = torch.as_tensor(w, dtype=base.dtype, device=base.device)[:, None]
    return ((base - target).abs() * w).sum(dim=(-2, -1)).clamp_min(floor)


@dataclasses.dataclass
class LossBreakdown:
    loss: torch.Tensor
    ratios: torch.Tensor  # ... x C
    base_error: torch.Tensor  # ... x C


def loss_fn(pred, target, base, w, floor=BASE_ERROR_FLOOR) -> LossBreakdown:
    """Mean over variables (and samples) of prediction error / base error."""
    e = per_variable_base_error(base, target, w, floor)
    wt = torch.as_tensor(w, dtype=pred.dtype, device=pred.device)[:, None]
    e_hat = ((pred - target).abs() * wt).sum(dim=(-2, -1))
    ratios = e_hat / e
    return LossBreakdown(ratios.mean(), ratios, e)


def warmup_span(iters_per_epoch, fraction=1 / 3):
    return max(1, math.floor(iters_per_epoch * fraction))


def lr_at(iteration, total_iterations, iters_per_epoch, config: TrainConfig) -> float:
    """Linear warmup from ``lr_start`` then cosine annealing to ``lr_floor``.

    Warmup covers ``floor(iters_per_epoch * warmup_fraction)`` iterations and
    reaches ``max_lr`` at its end; the final iteration sits at ``lr_floor``.
    """
    if not 0 <= iteration < total_iterations:
        raise IndexError(f"iteration {iteration} outside [0, {total_iterations})")
    warm = min(warmup_span(iters_per_epoch, config.warmup_fraction), total_iterations - 1)
    if iteration < warm:
        return config.lr_start + (config.max_lr - config.lr_start) * iteration / warm
    span = total_iterations - 1 - warm
    if span <= 0:
        return config.max_lr
    progress = (iteration - warm) / span
    return config.lr_floor + (config.max_lr - config.lr_floor) * (1 + math.cos(math.pi * progress)) / 2


class NormalizedPack:
    """Channel-first normalized tensors per time index, cached on first use."""

    def __init__(self, pack: GridPack, stats: NormStats, dtype=torch.float32, cache_size=4096):
        self.pack = pack
        self.stats = stats
        self.dtype = dtype
        cat = pack.catalog
        if tuple(stats.pollutant_vars) != cat.pollutant_vars or tuple(stats.met_vars) != cat.met_vars:
            raise ValueError("normalization statistics do not match the pack catalog")
        self.statics = self._tensor(normalize_statics(np.asarray(pack.statics)))
        self.pollutants = functools.lru_cache(cache_size)(self._pollutants)
        self.met = functools.lru_cache(cache_size)(self._met)

    def _tensor(self, arr):
        return torch.as_tensor(np.ascontiguousarray(np.moveaxis(arr, -1, 0)), dtype=self.dtype)

    def _pollutants(self, t):
        return self._tensor(self.stats.normalize_pollutants(np.asarray(self.pack.pollutants[t])))

    def _met(self, t):
        return self._tensor(self.stats.normalize_met(np.asarray(self.pack.meteorology[t])))

    def batch(self, starts, steps):
        """Inputs and targets for windows whose initial indices are ``starts``."""
        stack = lambda f, off: torch.stack([f(t + off) for t in starts])  # noqa: E731
        return {
            "p_prev": stack(self.pollutants, -1),
            "p_now": stack(self.pollutants, 0),
            "met": [stack(self.met, k) for k in range(steps + 1)],
            "targets": [stack(self.pollutants, k) for k in range(1, steps + 1)],
            "statics": self.statics.expand(len(starts), *self.statics.shape),
        }


def window_starts(n_times, steps):
    """Initial indices t with t-1 >= 0 and t+steps <= n_times-1."""
    return list(range(1, n_times - steps))


def step_losses(model, data: NormalizedPack, starts, steps, w, use_met=True):
    """Per-step LossBreakdowns of an unrolled forecast from ``starts``."""
    batch = data.batch(starts, steps)
    init_times = [data.pack.times[t] for t in starts]
    outputs = rollout_normalized(
        model, batch["p_prev"], batch["p_now"], batch["statics"], batch["met"], init_times, steps,
        data.pack.catalog.greyline_mask(), data.stats.lower_bounds(), use_met=use_met,
    )
    return [loss_fn(out.prediction, tgt, out.base.values, w) for out, tgt in zip(outputs, batch["targets"])]


@dataclasses.dataclass
class TrainResult:
    epoch_losses: list
    iteration_losses: list
    checkpoint: Path | None


def _batches(starts, batch_size, generator):
    order = torch.randperm(len(starts), generator=generator).tolist()
    shuffled = [starts[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def train_stage(pack: GridPack, config: TrainConfig, model: ForecastModel, stats: NormStats,
                out_dir=None, extra_meta=None) -> TrainResult:
    """Run one training stage. Writes ``checkpoint.pt`` and ``metrics.jsonl`` under ``out_dir``."""
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    dtype = next(model.parameters()).dtype
    data = NormalizedPack(pack, stats, dtype=dtype)
    steps = config.rollout_steps
    starts = window_starts(len(pack), steps)
    if not starts:
        raise ValueError(f"pack of {len(pack)} steps has no {steps}-step training window")
    w = torch.as_tensor(latitude_weights(pack.grid), dtype=dtype)

    n_windows = min(len(starts), config.max_windows or len(starts))
    iters_per_epoch = math.ceil(n_windows / config.batch_size)
    total = iters_per_epoch * config.epochs
    opt = torch.optim.AdamW(
        model.parameters(), lr=config.lr_start, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay,
    )
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    epoch_losses, iter_losses = [], []
    ckpt = None
    it = 0
    try:
        model.train()
        for epoch in range(config.epochs):
            batches = _batches(starts, config.batch_size, generator)[:iters_per_epoch]
            running = 0.0
            for batch in batches:
                lr = lr_at(it, total, iters_per_epoch, config)
                for group in opt.param_groups:
                    group["lr"] = lr
                parts = step_losses(model, data, batch, steps, w, use_met=config.use_met)
                loss = sum(p.loss for p in parts) / len(parts)
                if not torch.isfinite(loss):
                    _dump_batch(out_dir, data, batch, steps, it)
                    raise TrainingError(f"non-finite loss at iteration {it} (windows {batch})")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                value = float(loss.detach())
                iter_losses.append(value)
                running += value
                if metrics is not None:
                    ratios = torch.stack([p.ratios.detach().mean(0) for p in parts]).mean(0)
                    metrics.write(json.dumps({
                        "iteration": it, "epoch": epoch, "lr": lr, "loss": value,
                        "ratios": dict(zip(pack.catalog.pollutant_vars, ratios.tolist())),
                    }) + "\n")
                it += 1
            epoch_losses.append(running / len(batches))
            log.info("epoch %d loss %.5f", epoch, epoch_losses[-1])
            if out_dir is not None:
                ckpt = out_dir / "checkpoint.pt"
                save_checkpoint(
                    ckpt, model, stats, stage=config.stage, epoch=epoch, use_met=config.use_met,
                    train_config=dataclasses.asdict(config), loss_history=epoch_losses,
                    **(extra_meta or {}),
                )
    finally:
        if metrics is not None:
            metrics.close()
        model.eval()
    return TrainResult(epoch_losses, iter_losses, ckpt)


def _dump_batch(out_dir, data, starts, steps, iteration):
    if out_dir is None:
        return
    batch = data.batch(starts, steps)
    np.savez(
        out_dir / f"nonfinite_batch_{iteration}.npz",
        starts=np.asarray(starts), p_prev=batch["p_prev"].numpy(), p_now=batch["p_now"].numpy(),
        met=np.stack([m.numpy() for m in batch["met"]]), targets=np.stack([t.numpy() for t in batch["targets"]]),
    )
