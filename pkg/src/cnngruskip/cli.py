"""Command-line entry point: synth, train, eval, predict, ablate, inspect.

Exit codes: 0 success, 1 usage or validation error, 2 data error
(missing/corrupt input files included), 3 runtime failure such as a
diverged training run.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import metrics as ME
from . import plotting
from .model import SHORT_NAMES, VARIANT_ALIASES, ConfigError, ModelConfig, build_variant
from .training import (Checkpoint, CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint,
                       save_checkpoint, train, write_history_csv)

logger = logging.getLogger("cnngruskip")

DATA_ENV = "CNNGRUSKIP_DATA_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags, config values or output collisions (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- config files ---------------------------------------------------------------------
def _coerce(raw: str, default, key: str):
    text = raw.strip()
    if text.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        if text.lower() in ("true", "yes", "1", "on"):
            return True
        if text.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if default and isinstance(default[0], str):
            return tuple(items)
        try:
            return tuple(int(t) for t in items)
        except ValueError:
            raise ValueError(f"{key}: expected a comma-separated list of integers, got {raw!r}") from None
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float) or default is None:
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> tuple[ModelConfig, TrainConfig]:
    """Parse the flat ``key = value`` format into model and training configs.

    Keys are ModelConfig and TrainConfig field names; ``#`` starts a comment;
    lists are comma-separated. Every problem is collected before raising.
    """
    model_defaults = {f.name: f.default for f in fields(ModelConfig)}
    train_defaults = {f.name: f.default for f in fields(TrainConfig)}
    model_kw, train_kw, errors = {}, {}, []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        if key in seen:
            errors.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        seen.add(key)
        if key in model_defaults:
            target, default = model_kw, model_defaults[key]
        elif key in train_defaults:
            target, default = train_kw, train_defaults[key]
        else:
            errors.append(f"{source}:{lineno}: unknown config key {key!r}")
            continue
        try:
            target[key] = _coerce(value, default, key)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: {exc}")
    if errors:
        raise ConfigError(errors)
    problems = []
    try:
        model_cfg = ModelConfig(**model_kw)
    except ConfigError as exc:
        problems += exc.errors
        model_cfg = None
    try:
        train_cfg = TrainConfig(**train_kw)
    except ConfigError as exc:
        problems += exc.errors
        train_cfg = None
    if problems:
        raise ConfigError(problems)
    return model_cfg, train_cfg


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), str(p))


def config_text(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    """Render configs back into the flat format (every default materialised)."""
    lines = []
    for obj in (model_cfg, train_cfg):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# -- helpers -------------------------------------------------------------------------
def _resolve_data(path: str | None) -> Path:
    base = os.environ.get(DATA_ENV)
    if path is None:
        if not base:
            raise UsageError(f"--data is required (or set {DATA_ENV})")
        path = str(Path(base) / "traffic.csv")
    p = Path(path)
    if not p.exists() and base and not p.is_absolute() and (Path(base) / p).exists():
        p = Path(base) / p
    if not p.is_file():
        raise FileNotFoundError(f"data file not found: {p}")
    return p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _claim(paths, force: bool) -> None:
    clash = [str(p) for p in paths if Path(p).exists()]
    if clash and not force:
        raise UsageError("refusing to overwrite existing output(s) without --force: " + ", ".join(clash))


def _outdir(path: str) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out must be a directory: {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(path: Path, command: str, **payload) -> None:
    doc = {"tool": "cnngruskip", "version": __version__, "command": command, **payload,
           "created_at": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _parse_horizons(text: str | None):
    if text is None:
        return None
    try:
        hs = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"--horizons must be comma-separated minutes, got {text!r}") from None
    for h in hs:
        if h <= 0 or h % 5:
            raise UsageError(f"horizon {h} is not a positive multiple of 5 minutes")
    return hs


def _parse_time(text: str) -> int:
    try:
        return D._parse_time(text)
    except ValueError:
        raise UsageError(f"cannot parse timestamp {text!r} (use epoch seconds or ISO-8601)") from None


def _datasets_for(ckpt: Checkpoint, series):
    cfg = ckpt.config
    for s in series:
        for c in cfg.channels:
            s.channel(c)
    return D.build_datasets(series, cfg.data_spec(), norm=ckpt.norm)


# -- commands ------------------------------------------------------------------------
def cmd_synth(args) -> int:
    out = Path(args.out)
    _claim([out], args.force)
    if args.days < 1 or args.sensors < 1:
        raise UsageError("--days and --sensors must be >= 1")
    out.parent.mkdir(parents=True, exist_ok=True)
    series = D.synth_generate(args.days, args.sensors, args.seed)
    D.write_csv(series, out)
    rows = D.summary_table(series)
    cols = ["column", "count", "mean", "std", "min", "25%", "50%", "75%", "max"]
    print("\t".join(cols))
    for r in rows:
        print("\t".join(str(r[c]) if c in ("column", "count") else f"{r[c]:.4f}" for c in cols))
    logger.info("wrote %s (%d rows)", out, sum(len(s) for s in series))
    return EXIT_OK


def _train_configs(args):
    model_cfg, train_cfg = load_config(args.config)
    if args.seed is not None:
        train_cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": args.seed})
    if args.epochs is not None:
        train_cfg = TrainConfig(**{**train_cfg.to_dict(), "epochs": args.epochs})
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    data_path = _resolve_data(args.data)
    model_cfg, train_cfg = _train_configs(args)
    variant = VARIANT_ALIASES.get(args.variant)
    if variant is None:
        raise UsageError(f"unknown variant {args.variant!r}")
    out = _outdir(args.out)
    paths = {"best_checkpoint": out / "best.ckpt", "last_checkpoint": out / "last.ckpt",
             "loss_history": out / "loss_history.csv", "manifest": out / "manifest.json",
             "config": out / "config.txt", "loss_figure": out / "loss_curve.png"}
    _claim(paths.values(), args.force)
    series = D.load_csv(data_path)
    ds = D.build_datasets(series, model_cfg.data_spec())
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.config != model_cfg or resume.variant != variant:
            raise UsageError("--resume checkpoint was trained with a different config or variant")
    model = resume.to_model() if resume else build_variant(model_cfg, variant, train_cfg.seed)
    logger.info("training %s on %d samples (val %d)", variant, len(ds.train), len(ds.val))
    result = train(model, ds.train, ds.val, train_cfg, resume=resume, norm=ds.norm,
                   on_epoch=lambda e, a, b: logger.info("epoch %d  train %.5f  val %.5f", e, a, b))
    save_checkpoint(result.best, paths["best_checkpoint"])
    save_checkpoint(result.last, paths["last_checkpoint"])
    write_history_csv(result.history, paths["loss_history"])
    paths["config"].write_text(config_text(model_cfg, train_cfg))
    fig = plotting.loss_curve(result.history, paths["loss_figure"], title=f"{variant} training")
    if fig is None:
        paths.pop("loss_figure")
    _write_manifest(paths["manifest"], "train", seed=train_cfg.seed, variant=variant,
                    model_config=model_cfg.to_dict(), train_config=train_cfg.to_dict(),
                    data={"path": str(data_path), "sha256": _sha256(data_path)},
                    norm=ds.norm.to_dict(), best_epoch=result.best.epoch,
                    best_val_loss=result.best.best_val_loss, stopped_early=result.stopped_early,
                    artifacts={k: str(v) for k, v in paths.items()})
    print(f"best epoch {result.best.epoch}  val loss {result.best.best_val_loss:.6f}  -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data_path = _resolve_data(args.data)
    horizons = _parse_horizons(args.horizons) or tuple(ckpt.config.horizons)
    missing = [h for h in horizons if h not in ckpt.config.horizons]
    if missing:
        raise UsageError(f"horizons {list(missing)} are not produced by this checkpoint "
                         f"(model horizons {list(ckpt.config.horizons)})")
    out = _outdir(args.out)
    paths = {"report_csv": out / "report.csv", "report_json": out / "report.json",
             "predictions": out / "predictions.csv", "manifest": out / "manifest.json",
             "metrics_figure": out / "metrics.png", "trace_figure": out / "forecast.png"}
    _claim(paths.values(), args.force)
    series = D.load_csv(data_path)
    ds = _datasets_for(ckpt, series)
    batch = {"train": ds.train, "val": ds.val, "test": ds.test}[args.split]
    model = ckpt.to_model()
    rep, pred = ME.evaluate(model, batch, horizons, norm=ds.norm,
                            variant=SHORT_NAMES[model.variant], split=args.split)
    reports = [rep]
    if args.with_ha:
        ha = ME.ha_fit(ds.segments["train"])
        reports.append(ME.evaluate(ha, batch, horizons, norm=ds.norm, split=args.split)[0])
    ME.write_reports_csv(reports, paths["report_csv"])
    ME.write_reports_json(reports, paths["report_json"])
    pred.write_csv(paths["predictions"])
    made = plotting.metrics_by_horizon(reports, paths["metrics_figure"])
    first = pred.horizons == horizons[0]
    made = plotting.forecast_trace(pred.timestamps[first], pred.y_true[first], pred.y_pred[first],
                                   paths["trace_figure"]) and made
    if made is None:
        paths.pop("metrics_figure")
        paths.pop("trace_figure")
    _write_manifest(paths["manifest"], "eval", seed=None, checkpoint=str(args.checkpoint),
                    checkpoint_sha256=_sha256(Path(args.checkpoint)), split=args.split,
                    horizons=list(horizons), model_config=ckpt.config.to_dict(),
                    data={"path": str(data_path), "sha256": _sha256(data_path)},
                    artifacts={k: str(v) for k, v in paths.items()})
    for r in reports:
        for row in r.rows:
            print(f"{r.variant}\t{row.horizon_minutes} min\tRMSE {row.rmse:.4f}\tMAE {row.mae:.4f}\t"
                  f"n {row.n}")
    return EXIT_OK


def predict_point(ckpt: Checkpoint, series: D.TrafficSeries, at: int, horizons) -> list[tuple]:
    """Forecasts issued at time ``at`` (the last input timestamp) for one sensor.

    Returns ``(target_timestamp, horizon_minutes, forecast)`` per horizon.
    """
    cfg = ckpt.config
    idx = np.flatnonzero(series.timestamps == at)
    if idx.size == 0:
        lo, hi = int(series.timestamps[0]), int(series.timestamps[-1])
        raise D.DataError(f"timestamp {at} is not in the data for sensor {series.sensor_id} "
                          f"(coverage {lo}..{hi} on the 5-minute grid)")
    i = int(idx[0])
    reach = max(cfg.horizon_steps)
    need = max(cfg.window_len - 1, cfg.skip_step * cfg.n_periods - reach)
    if i < need:
        raise D.DataError(f"insufficient history at {at}: the window and skip context need {need} "
                          f"points before the issue time (window_len {cfg.window_len}, "
                          f"j*n = {cfg.skip_step}*{cfg.n_periods} = {cfg.skip_step * cfg.n_periods} "
                          f"back from the furthest target), only {i} available")
    norm = ckpt.norm
    chans = np.stack([D.normalize(series.channel(c)[i - cfg.window_len + 1:i + 1], norm, c)
                      for c in cfg.channels])
    anchor = i + reach
    offs = cfg.skip_step * np.arange(cfg.n_periods, 0, -1)
    skip = D.normalize(series.flow[anchor - offs], norm)
    model = ckpt.to_model()
    batch = D.WindowBatch(chans[None], skip[None], np.zeros((1, len(cfg.horizons))),
                          tuple(cfg.horizons))
    raw = D.denormalize(model.predict(batch), norm)[0]
    out = []
    for h in horizons:
        k = list(cfg.horizons).index(h)
        out.append((at + 60 * h, h, float(raw[k])))
    return out


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.norm is None:
        raise CheckpointError("checkpoint carries no normalisation stats")
    data_path = _resolve_data(args.data)
    if args.horizon is not None and (args.horizon <= 0 or args.horizon % 5):
        raise UsageError(f"--horizon must be a positive multiple of 5 minutes, got {args.horizon}")
    horizons = [args.horizon] if args.horizon is not None else list(ckpt.config.horizons)
    bad = [h for h in horizons if h not in ckpt.config.horizons]
    if bad:
        raise UsageError(f"--horizon {bad[0]} is not produced by this checkpoint "
                         f"(model horizons {list(ckpt.config.horizons)})")
    at = _parse_time(args.at)
    if args.out:
        _claim([args.out], args.force)
    series = {s.sensor_id: s for s in D.load_csv(data_path)}
    sid = args.sensor if args.sensor is not None else min(series)
    if sid not in series:
        raise D.DataError(f"sensor {sid} is not in {data_path} (sensors {sorted(series)})")
    rows = predict_point(ckpt, series[sid], at, horizons)
    lines = ["sensor_id,issued_at,timestamp,horizon,y_pred"]
    lines += [f"{sid},{at},{t},{h},{v!r}" for t, h, v in rows]
    print("\n".join(lines))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    data_path = _resolve_data(args.data)
    model_cfg, train_cfg = _train_configs(args)
    out = _outdir(args.out)
    short = ("full", "F", "T", "P")
    paths = {"table": out / "ablation_table.csv", "delta": out / "ablation_delta.csv",
             "reports_csv": out / "reports.csv", "reports_json": out / "reports.json",
             "manifest": out / "manifest.json", "figure": out / "ablation.png"}
    per_variant = {v: out / f"report_{v}.csv" for v in short}
    _claim(list(paths.values()) + list(per_variant.values()), args.force)
    series = D.load_csv(data_path)
    ds = D.build_datasets(series, model_cfg.data_spec())
    result = ME.ablation_run(model_cfg, ds, train_cfg, seed=train_cfg.seed,
                             on_epoch=lambda v, e, a, b: logger.info("%s epoch %d train %.5f val %.5f",
                                                                     v, e, a, b))
    horizon = _parse_horizons(args.horizon)[0] if args.horizon else model_cfg.horizons[0]
    rows = result.table(horizon)
    ME.write_table_csv(rows, ("variant", "RMSE", "MAE"), paths["table"])
    ME.write_table_csv(rows, ("variant", "RMSE", "MAE", "dRMSE", "dMAE"), paths["delta"])
    reports = [result.reports[v] for v in short]
    for v in short:
        ME.write_reports_csv([result.reports[v]], per_variant[v])
    ME.write_reports_csv(reports, paths["reports_csv"])
    ME.write_reports_json(reports, paths["reports_json"])
    if plotting.ablation_bars(rows, paths["figure"]) is None:
        paths.pop("figure")
    _write_manifest(paths["manifest"], "ablate", seed=train_cfg.seed, horizon=horizon,
                    model_config=model_cfg.to_dict(), train_config=train_cfg.to_dict(),
                    data={"path": str(data_path), "sha256": _sha256(data_path)},
                    artifacts={**{k: str(v) for k, v in paths.items()},
                               **{f"report_{v}": str(p) for v, p in per_variant.items()}})
    print("variant\tRMSE\tMAE\tdRMSE\tdMAE")
    for r in rows:
        print(f"{r['variant']}\t{r['RMSE']:.4f}\t{r['MAE']:.4f}\t{r['dRMSE']:+.4f}\t{r['dMAE']:+.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    info = {"variant": ckpt.variant, "epoch": ckpt.epoch, "best_epoch": ckpt.best_epoch,
            "best_val_loss": ckpt.best_val_loss, "parameters": model.parameter_count(),
            "model_config": ckpt.config.to_dict(),
            "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
            "norm": ckpt.norm.to_dict() if ckpt.norm else None,
            "history_epochs": len(ckpt.history), "resumable": bool(ckpt.optimizer_state),
            "digest": model.state_digest()}
    if args.arrays:
        info["arrays"] = {k: list(v.shape) for k, v in sorted(ckpt.params.items())}
    print(json.dumps(info, indent=2, sort_keys=True, default=str))
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cnngruskip", description="CNN + skip-GRU + transformer traffic-flow forecaster.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write synthetic periodic traffic as CSV")
    s.add_argument("--days", type=int, default=28)
    s.add_argument("--sensors", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="CSV file to write")
    s.add_argument("--force", action="store_true", help="overwrite existing outputs")
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train", cmd_train, "train one model variant"),
                                 ("ablate", cmd_ablate, "train and compare full, F, T and P")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--data", help=f"input CSV (default ${DATA_ENV}/traffic.csv)")
        t.add_argument("--config", help="flat 'key = value' config file")
        t.add_argument("--out", required=True, help="output directory")
        t.add_argument("--seed", type=int, help="overrides the config's seed")
        t.add_argument("--epochs", type=int, help="overrides the config's epochs")
        t.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name == "train":
            t.add_argument("--variant", default="full", help="full, F, T or P")
            t.add_argument("--resume", help="continue from a last.ckpt")
        else:
            t.add_argument("--horizon", help="horizon (minutes) for the combined table")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a data split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--horizons", help="comma-separated minutes, e.g. 10,30,60")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--with-ha", action="store_true", help="also report the historical average")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("predict", help="point forecast issued at a timestamp")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--data")
    q.add_argument("--at", required=True, help="issue time = last input timestamp")
    q.add_argument("--horizon", type=int, help="minutes ahead (default: every model horizon)")
    q.add_argument("--sensor", type=int)
    q.add_argument("--out", help="optional CSV file")
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_predict)

    i = sub.add_parser("inspect", help="summarise a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--arrays", action="store_true", help="list parameter arrays and shapes")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("error: invalid configuration:", file=sys.stderr)
        for e in exc.errors:
            print(f"  - {e}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, D.DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
