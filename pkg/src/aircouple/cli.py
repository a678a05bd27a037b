"""``aircouple`` command-line entry point.

Commands communicate only through files under the run's ``workdir``::

    data/train.gridpack  data/test.gridpack   gen-data
    norm_stats.json                           stats
    <stage>/checkpoint.pt  <stage>/metrics.jsonl   train
    forecasts/init_<index>.gridpack           forecast
    report.json                               evaluate
    scorecard.csv  scorecard_summary.csv      scorecard

Failures print one JSON line on stderr: ``{"error": ..., "message": ..., "path": ...}``.
Exit codes: 0 ok, 1 other failure, 2 config schema violation, 3 missing input.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import torch

from aircouple.backbone import ForecastModel, ModelConfig, load_checkpoint
from aircouple.dataio import read_pack, write_pack
from aircouple.errors import ConfigError
from aircouple.evaluate import EvalReport, evaluate_forecasts, persistence_report, scorecard
from aircouple.forecast import forecast_pack, rollout_from_pack
from aircouple.grid import GridSpec
from aircouple.normalize import NormStats
from aircouple.synthworld import WorldConfig, generate_world, split_world
from aircouple.training import STAGES, TrainConfig, train_stage

log = logging.getLogger("aircouple")

EXIT_OK, EXIT_FAIL, EXIT_SCHEMA, EXIT_MISSING = 0, 1, 2, 3
STAGE_KEYS = ("pretrain", "finetune", "multistep")


class CliError(Exception):
    def __init__(self, code, kind, message, path=None):
        super().__init__(message)
        self.code, self.kind, self.path = code, kind, path


def load_schema() -> dict:
    return json.loads(resources.files("aircouple").joinpath("run_config.schema.json").read_text(encoding="utf-8"))


def validate_config(raw: dict) -> dict:
    """Schema-check a RunConfig dict; raises CliError(exit 2) naming the offending key."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path = ".".join(filter(None, [path, extra[0] if extra else ""]))
        raise CliError(EXIT_SCHEMA, "schema", err.message, path or "<root>")
    return raw


@dataclasses.dataclass
class RunConfig:
    raw: dict

    @classmethod
    def load(cls, path=None, workdir=None) -> RunConfig:
        raw = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise CliError(EXIT_MISSING, "missing_input", f"config file {path} not found", str(path))
            try:
                raw = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise CliError(EXIT_SCHEMA, "schema", f"invalid JSON: {exc}", "<root>") from None
        validate_config(raw)
        raw = copy.deepcopy(raw)
        if workdir is not None:
            raw.setdefault("paths", {})["workdir"] = str(workdir)
        return cls(raw)

    @property
    def workdir(self) -> Path:
        return Path(self.raw.get("paths", {}).get("workdir", "run"))

    def world(self, seed=None) -> WorldConfig:
        kw = dict(self.raw.get("world", {}))
        if "grid" in kw:
            kw["grid"] = GridSpec.from_dict(kw["grid"])
        if seed is not None:
            kw["seed"] = seed
        try:
            return WorldConfig(**kw)
        except ConfigError as exc:
            raise CliError(EXIT_SCHEMA, "schema", str(exc), exc.path) from None
        except ValueError as exc:
            raise CliError(EXIT_SCHEMA, "schema", str(exc), "world") from None

    @property
    def n_train(self) -> int:
        return self.raw.get("data", {}).get("n_train", 320)

    @property
    def skew_vars(self):
        return self.raw.get("data", {}).get("skew_vars")

    def model(self, n_pollutants, n_met, n_static) -> ModelConfig:
        try:
            return ModelConfig(n_pollutants=n_pollutants, n_met=n_met, n_static=n_static, **self.raw.get("model", {}))
        except ValueError as exc:
            raise CliError(EXIT_SCHEMA, "schema", str(exc), "model") from None

    def train(self, stage, seed=None, use_met=None) -> TrainConfig:
        section = dict(self.raw.get("train", {}))
        per_stage = {k: section.pop(k) for k in STAGE_KEYS if k in section}
        kw = {**section, **per_stage.get(stage, {})}
        if seed is not None:
            kw["seed"] = seed
        if use_met is not None:
            kw["use_met"] = use_met
        try:
            return TrainConfig.for_stage(stage, **kw)
        except ValueError as exc:
            raise CliError(EXIT_SCHEMA, "schema", str(exc), f"train.{stage}") from None


def _need(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise CliError(EXIT_MISSING, "missing_input", f"{what} {path} not found", str(path))
    return Path(path)


def _pack(path, what="pack"):
    return read_pack(_need(path, what))


def _stats(cfg: RunConfig):
    return NormStats.load(_need(cfg.workdir / "norm_stats.json", "normalization statistics"))


def cmd_gen_data(args, cfg: RunConfig):
    world = cfg.world(seed=args.seed)
    n_train = cfg.n_train
    if not 3 <= n_train <= world.n_steps - 3:
        raise CliError(EXIT_SCHEMA, "schema", f"n_train={n_train} incompatible with n_steps={world.n_steps}",
                       "data.n_train")
    train, test = split_world(generate_world(world), n_train)
    out = cfg.workdir / "data"
    write_pack(train, out / "train.gridpack", overwrite=True)
    write_pack(test, out / "test.gridpack", overwrite=True)
    return {"train": str(out / "train.gridpack"), "test": str(out / "test.gridpack")}


def cmd_stats(args, cfg: RunConfig):
    pack = _pack(args.pack or cfg.workdir / "data" / "train.gridpack", "training pack")
    stats = NormStats.fit(pack, skew_vars=cfg.skew_vars)
    out = cfg.workdir / "norm_stats.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    stats.save(out)
    return {"norm_stats": str(out)}


def cmd_train(args, cfg: RunConfig):
    pack = _pack(args.pack or cfg.workdir / "data" / "train.gridpack", "training pack")
    stats = _stats(cfg)
    use_met = False if args.no_met else None
    config = cfg.train(args.stage, seed=args.seed, use_met=use_met)
    torch.manual_seed(config.seed)
    if args.init_from:
        model, payload = load_checkpoint(_need(args.init_from, "checkpoint"))
        parent = str(args.init_from)
    else:
        cat = pack.catalog
        model = ForecastModel(cfg.model(cat.n_pollutants, cat.n_met, cat.n_static))
        parent = None
    out = Path(args.out) if args.out else cfg.workdir / args.stage
    result = train_stage(pack, config, model, stats, out_dir=out, extra_meta={"init_from": parent})
    return {"checkpoint": str(result.checkpoint), "final_loss": result.epoch_losses[-1]}


def cmd_forecast(args, cfg: RunConfig):
    model, payload = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    pack = _pack(args.pack or cfg.workdir / "data" / "test.gridpack", "initial-condition pack")
    stats = NormStats.from_dict(payload["norm_stats"]) if payload.get("norm_stats") else _stats(cfg)
    use_met = payload.get("use_met", True)
    t0, steps = args.init_index, args.steps
    try:
        fields = rollout_from_pack(model, pack, t0, steps, stats, use_met=use_met)
    except IndexError as exc:
        raise CliError(EXIT_FAIL, "argument", str(exc), "--init-index") from None
    met = [pack.met_field(t0 + k) for k in range(1, steps + 1)]
    fc = forecast_pack(fields, met, pack.static_field(), pack.grid, pack.catalog, pack.times[t0],
                       attrs={"checkpoint": str(args.checkpoint), "use_met": use_met})
    out = Path(args.out) if args.out else cfg.workdir / "forecasts" / f"init_{t0:04d}.gridpack"
    write_pack(fc, out, overwrite=True)
    return {"forecast": str(out), "records": len(fc)}


def cmd_evaluate(args, cfg: RunConfig):
    truth = _pack(args.truth, "truth pack")
    preds = [_pack(p, "forecast pack") for p in args.pred]
    report = evaluate_forecasts(preds, truth)
    if args.baseline:
        report = report.with_baseline(evaluate_forecasts([_pack(p, "baseline pack") for p in args.baseline], truth))
    elif args.persistence:
        report = report.with_baseline(persistence_report(preds, truth))
    out = Path(args.out) if args.out else cfg.workdir / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    return {"report": str(out), "max_rmse": float(report.rmse.max())}


def cmd_scorecard(args, cfg: RunConfig):
    report = EvalReport.load(_need(args.report or cfg.workdir / "report.json", "report"))
    if report.baseline_rmse is None:
        raise CliError(EXIT_FAIL, "argument", "report has no baseline; rerun evaluate with --baseline or --persistence")
    out = Path(args.out) if args.out else cfg.workdir / "scorecard.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    png = out.with_suffix(".png") if args.png else None
    card = scorecard(report, out, png)
    for line in card.summary_lines():
        print(line)
    return {"scorecard": str(out), "image": str(png) if png else None}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aircouple", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="RunConfig JSON (see run_config.schema.json)")
    p.add_argument("--workdir", help="override paths.workdir")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic train/test packs")
    g.add_argument("--seed", type=int, help="override world.seed")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("stats", help="fit normalization statistics on the training pack")
    s.add_argument("--pack")
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", choices=STAGES, default="pretrain")
    t.add_argument("--init-from", help="checkpoint to continue from")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.add_argument("--no-met", action="store_true", help="zero the meteorology inputs (ablation)")
    t.add_argument("--pack")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="roll a checkpoint forward from one initialization")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--pack")
    f.add_argument("--init-index", type=int, default=1)
    f.add_argument("--steps", type=int, default=10, help="number of 12 h steps K")
    f.add_argument("--out")
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", help="weighted RMSE of forecast packs against truth")
    e.add_argument("--pred", nargs="+", required=True)
    e.add_argument("--truth", required=True)
    group = e.add_mutually_exclusive_group()
    group.add_argument("--baseline", nargs="+", help="baseline forecast packs for normalized RMSE")
    group.add_argument("--persistence", action="store_true", help="use persistence as the baseline")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("scorecard", help="variable x lead-day normalized RMSE matrix")
    c.add_argument("--report")
    c.add_argument("--out")
    c.add_argument("--png", action="store_true", help="also render a heat map")
    c.set_defaults(func=cmd_scorecard)
    return p


def _fail(code, kind, message, path=None):
    print(json.dumps({"error": kind, "message": message, "path": path}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "steps", 1) < 1:
        return _fail(EXIT_FAIL, "argument", "--steps must be >= 1", "--steps")
    try:
        cfg = RunConfig.load(args.config, args.workdir)
        result = args.func(args, cfg)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), exc.path)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_input", str(exc), getattr(exc, "filename", None))
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        return _fail(EXIT_FAIL, type(exc).__name__, str(exc).splitlines()[0] if str(exc) else repr(exc))
    print(json.dumps({"command": args.command, **result}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
