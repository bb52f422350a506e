"""``kia simulate|train|evaluate|report|ablation``.

Exit codes: 0 success, 1 nothing usable to report, 2 configuration or input
error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import pipeline
from .config import BASELINES, ExperimentConfig, metadata, write_metadata
from .data import DatasetFormatError, GridSeries, load_dataset, save_dataset, save_grid
from .errors import ConfigurationError
from .evaluation import WINDOWS, ForecastReport, ModelForecaster
from .models import CheckpointError, load_checkpoint, save_checkpoint
from .plotting import error_chart
from .training import TrainingDiverged, write_history

log = logging.getLogger("kia")

EXIT_OK, EXIT_EMPTY, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _ints(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config(args, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.override("seed", args.seed)
    for key, val in overrides.items():
        if val is not None:
            cfg = cfg.override(key, val)
    return cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {out}: {exc}") from None
    return out


def _echo(cfg: ExperimentConfig) -> None:
    print("# config " + json.dumps(cfg.effective(), sort_keys=True, separators=(",", ":")))


def _load_data(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise ConfigurationError(f"dataset {path} not found") from None
    except DatasetFormatError as exc:
        raise ConfigurationError(str(exc)) from None


def _training_overrides(args) -> dict:
    return {
        "variant": getattr(args, "variant", None),
        "train.k_steps": getattr(args, "k_steps", None),
        "train.max_epochs": getattr(args, "epochs", None),
        "train.patience": getattr(args, "patience", None),
        "train.learning_rate": getattr(args, "lr", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "weights.bwd": getattr(args, "lambda_bwd", None),
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _config(args, kind=args.kind, noise_std=args.noise, **{"pendulum.theta0": args.theta0})
    out = _out(args, "runs/data")
    _echo(cfg)
    ds = pipeline.make_dataset(cfg)
    path = out / "dataset.bin"
    if isinstance(ds, GridSeries):
        save_grid(ds, path)
    else:
        save_dataset(ds, path)
    write_metadata(out, metadata("simulate", cfg, dataset=path.name, shape=list(ds.observations.shape),
                                 split=list(ds.split)))
    print(f"wrote {path} shape={tuple(ds.observations.shape)} split={tuple(ds.split)}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_data(args.data)
    cfg = _config(args, kind=pipeline.dataset_kind(ds), **_training_overrides(args))
    out = _out(args, "runs/train")
    _echo(cfg)

    def progress(row):
        log.info("epoch %d train %.6g val %.6g", row["epoch"], row["L_total_train"], row["L_total_val"])

    try:
        result = pipeline.fit(cfg, ds, progress=progress)
    except TrainingDiverged as exc:
        write_metadata(out, metadata("train", cfg, data=str(args.data), status="diverged", error=str(exc)))
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(result.model, out / "model.ckpt", extra={"seed": cfg.seed})
    write_history(result.history, out / "history.csv")
    write_metadata(out, metadata(
        "train", cfg, data=str(args.data), status="ok", epochs=len(result.history),
        best_epoch=result.best_epoch, stopped_early=result.stopped_early,
        model=result.model.spec.to_json(),
    ))
    best = result.history[result.best_epoch - 1]
    print(f"trained {cfg.variant}: {len(result.history)} epochs, best epoch {result.best_epoch}, "
          f"val loss {best['L_total_val']:.6g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = _load_data(args.data)
    if args.model and args.baseline:
        raise ConfigurationError("give either --model or --baseline, not both")
    if not args.model and not args.baseline:
        raise ConfigurationError("evaluate needs --model CKPT or --baseline NAME")
    overrides = {"kind": pipeline.dataset_kind(ds), "evaluate.horizon": args.horizon,
                 "evaluate.inits": args.inits,
                 "evaluate.clean_targets": True if args.clean_targets else None}
    if args.k_day is not None:
        overrides["evaluate.k_day"] = args.k_day
    if args.model:
        try:
            model = load_checkpoint(args.model)
        except FileNotFoundError:
            raise ConfigurationError(f"checkpoint {args.model} not found") from None
        except CheckpointError as exc:
            raise ConfigurationError(str(exc)) from None
        pipeline.check_compatible(model, ds)
        forecaster = ModelForecaster(model)
        overrides["variant"] = model.variant
    else:
        forecaster = pipeline.baseline(args.baseline, ds)
        overrides["variant"] = args.baseline
    cfg = _config(args, **overrides)
    out = _out(args, "runs/eval")
    _echo(cfg)

    rep = pipeline.horizon_report(forecaster, ds, cfg)
    rep.meta["variant"] = cfg.variant
    rep.write(out / "report.csv", out / "report.json")
    files = ["report.csv", "report.json"]
    if isinstance(ds, GridSeries) or args.k_day is not None:
        table = pipeline.k_day_table(forecaster, ds, cfg.raw["evaluate"]["k_day"])
        _write_k_day(out / "kday.csv", [(cfg.variant, ds.region if isinstance(ds, GridSeries) else "", table)])
        files.append("kday.csv")
        print("K-day MAE: " + ", ".join(f"K={K}: {v:.4f}" for K, v in table.means().items()))
    write_metadata(out, metadata("evaluate", cfg, data=str(args.data), model=args.model,
                                 files=files, anchors=[int(a) for a in rep.anchors],
                                 excluded_steps=rep.excluded))
    print("model | all | first100 | last100")
    print(f"{cfg.variant} | {rep.table_line()}")
    return EXIT_OK


def _write_k_day(path: Path, rows) -> None:
    leads = sorted({K for _, _, t in rows for K in t.leads})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "region"] + [f"K{K}" for K in leads])
        for label, region, t in rows:
            m = t.means()
            w.writerow([label, region] + [repr(m[K]) for K in leads])


def _setting_label(meta: dict) -> str:
    if meta.get("kind") == "climate" or "region" in meta:
        return str(meta.get("region", ""))
    parts = [f"theta0={meta.get('theta0')}"]
    if meta.get("noise_std"):
        parts.append(f"noise={meta['noise_std']}")
    return " ".join(parts)


def cmd_report(args) -> int:
    out = _out(args, "runs/report")
    runs = []
    for d in args.runs:
        d = Path(d)
        csv_path, json_path = d / "report.csv", d / "report.json"
        missing = [p.name for p in (csv_path, json_path) if not p.exists()]
        if missing:
            print(f"skipping {d}: missing {', '.join(missing)}", file=sys.stderr)
            continue
        try:
            rep = ForecastReport.read(csv_path, json_path)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            print(f"skipping {d}: unreadable report ({exc})", file=sys.stderr)
            continue
        runs.append((d, rep))
    if not runs:
        print("error: no usable runs", file=sys.stderr)
        return EXIT_EMPTY

    rows = []
    for d, rep in runs:
        agg = rep.aggregates()
        variant = rep.meta.get("variant", d.name)
        rows.append([variant, _setting_label(rep.meta)]
                    + [f"{agg[w]['mean']:.4f}±{agg[w]['std']:.4f}" for w in WINDOWS])
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "setting"] + list(WINDOWS))
        w.writerows(rows)

    groups = {}
    for (d, rep), row in zip(runs, rows):
        groups.setdefault(row[1], []).append((row[0], d, rep))
    figures = []
    for i, (setting, members) in enumerate(groups.items()):
        curves = {}
        for variant, d, rep in members:
            label = variant if variant not in curves else f"{variant} ({d.name})"
            with np.errstate(invalid="ignore"):
                curves[label] = np.nanmean(rep.errors, axis=0)
        metric = members[0][2].metric
        ylabel = "MAE (deg C)" if metric == "celsius" else "relative error"
        name = f"errors_{i + 1}.svg"
        error_chart(curves, out / name, title=setting, ylabel=ylabel, log=args.log)
        figures.append({"file": name, "setting": setting, "curves": list(curves)})
    (out / "figures.json").write_text(json.dumps(figures, indent=2) + "\n")
    (out / "metadata.json").write_text(json.dumps({
        "command": "report", "runs": [str(d) for d, _ in runs], "log_scale": bool(args.log),
        "skipped": [str(d) for d in args.runs if Path(d) not in {r for r, _ in runs}],
    }, indent=2, sort_keys=True) + "\n")

    print("model | setting | " + " | ".join(WINDOWS))
    for row in rows:
        print(" | ".join(row))
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = _config(args, noise_std=args.noise, **{"pendulum.theta0": args.theta0}, **_training_overrides(args))
    if cfg.kind != "pendulum":
        raise ConfigurationError("the training-size ablation runs on the pendulum task")
    out = _out(args, "runs/ablation")
    _echo(cfg)
    full = pipeline.make_dataset(cfg)
    datasets = [(s, pipeline.truncated(full, s)) for s in args.sizes]
    rows = []
    for size, ds in datasets:
        try:
            result = pipeline.fit(cfg, ds)
        except TrainingDiverged as exc:
            print(f"error: training with {size} points diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        rep = pipeline.horizon_report(ModelForecaster(result.model), ds, cfg)
        agg = rep.aggregates()
        rows.append([size] + [repr(agg[w][s]) for w in WINDOWS for s in ("mean", "std")])
        print(f"{cfg.variant} train={size} | {rep.table_line()}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train_points"] + [f"{w_}_{s}" for w_ in WINDOWS for s in ("mean", "std")])
        w.writerows(rows)
    write_metadata(out, metadata("ablation", cfg, sizes=list(args.sizes)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kia", description="Koopman invertible autoencoder experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", help="output directory")

    def training(sp):
        sp.add_argument("--variant", choices=["KIA", "KAE", "CKAE"])
        sp.add_argument("--k-steps", type=int, dest="k_steps")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int, dest="batch_size")
        sp.add_argument("--lambda-bwd", type=float, dest="lambda_bwd")

    s = sub.add_parser("simulate", help="generate a dataset file")
    common(s)
    s.add_argument("--kind", choices=["pendulum", "climate"])
    s.add_argument("--theta0", type=float)
    s.add_argument("--noise", type=float, help="observation noise std")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a model on a dataset file")
    common(t)
    t.add_argument("--data", required=True)
    training(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint or baseline on the test split")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--model", help="checkpoint file")
    e.add_argument("--baseline", choices=list(BASELINES))
    e.add_argument("--horizon", type=int)
    e.add_argument("--inits", type=int)
    e.add_argument("--k-day", type=_ints, dest="k_day")
    e.add_argument("--clean-targets", action="store_true", dest="clean_targets")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="compare evaluated runs")
    r.add_argument("runs", nargs="+", help="evaluation output directories")
    r.add_argument("--out", help="output directory")
    r.add_argument("--log", action="store_true", help="log-scale error axis")
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("ablation", help="vary the number of training points")
    common(a)
    training(a)
    a.add_argument("--sizes", type=_ints, default=[200, 300, 400])
    a.add_argument("--theta0", type=float)
    a.add_argument("--noise", type=float)
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
