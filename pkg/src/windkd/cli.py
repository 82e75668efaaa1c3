"""Command-line driver.

Subcommands::

    windkd synth        write the synthetic park as CSV files
    windkd train-park   train and save both park models per horizon
    windkd grid-search  sweep alpha or gamma and report argmins
    windkd ablate       run the six-model ablation and write the report
    windkd report       rebuild summaries and plot data from metrics.csv

Settings come from a TOML file (``--config``); ``WINDKD_SEED`` and
``WINDKD_OUT_DIR`` override the seed and output directory. Failures exit
nonzero with a ``[stage]`` tag on stderr.
"""
import argparse
from dataclasses import replace
import json
import logging
from pathlib import Path
import sys

import numpy as np

from .experiments import (
    AblationRunner,
    ConfigError,
    ForecastReport,
    emit_plot_data,
    emit_report,
    fast_config,
    load_config,
    load_frames,
    read_metric_rows,
    run_grid_search,
    summarize,
)
from .pipeline import StageError, train_park_model
from .synthetic import gen_park_dataset

log = logging.getLogger("windkd")

EXIT_CODES = {
    "config": 2,
    "data": 3,
    "park": 4,
    "student": 5,
    "transfer": 6,
    "corrector": 7,
    "report": 8,
    "ablate": 9,
    "grid": 10,
}


class CliError(Exception):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


def _config(args):
    overrides = {"seed": args.seed, "out_dir": args.out}
    try:
        cfg = load_config(args.config, overrides=overrides)
    except ConfigError as exc:
        raise CliError("config", str(exc)) from exc
    if getattr(args, "fast", False):
        cfg = fast_config(cfg)
    return cfg


def _frames(cfg):
    try:
        return load_frames(cfg)
    except (ConfigError, OSError, ValueError) as exc:
        raise CliError("data", str(exc)) from exc


def cmd_synth(args):
    cfg = _config(args)
    out = Path(cfg.out_dir) / "data"
    try:
        ds = gen_park_dataset(seed=cfg.seed, duration_days=cfg.data.duration_days)
        ds.write_csv(out)
    except (OSError, ValueError) as exc:
        raise CliError("data", str(exc)) from exc
    print(f"wrote {len(ds.entities)} entity files to {out}")


def cmd_train_park(args):
    from .nn import serialization

    cfg = _config(args)
    splits, _ = _frames(cfg)
    pcfg = cfg.pipeline_config()
    out = Path(cfg.out_dir) / "park"
    out.mkdir(parents=True, exist_ok=True)
    runner = AblationRunner(cfg, splits)
    for h in cfg.horizons:
        for with_nwp, tag in ((False, "I"), (True, "II")):
            try:
                pm = train_park_model(splits["park"][0], pcfg.window(h), with_nwp, pcfg,
                                      runner.seed("park", tag, h))
            except Exception as exc:
                raise CliError("park", f"horizon {h} model {tag}: {exc}") from exc
            serialization.save(out / f"park_h{h}_{tag}.wkdm",
                               serialization.net_tensors(pm.model.net_), pm.model.net_.topology(),
                               {"horizon": h, "with_nwp": with_nwp})
            res = pm.error.residuals
            print(f"horizon {h} f_{tag}: train residual rmse {np.sqrt(np.mean(res ** 2)):.4f}")


def cmd_grid_search(args):
    cfg = _config(args)
    if args.grid is not None:
        cfg = replace(cfg, **{f"{args.param}_grid": args.grid})
    try:
        cfg.validate()
    except ConfigError as exc:
        raise CliError("config", str(exc)) from exc
    splits, data_hash = _frames(cfg)
    try:
        result = run_grid_search(cfg, args.param, runner=AblationRunner(cfg, splits, data_hash))
    except StageError as exc:
        raise CliError(exc.stage, str(exc)) from exc
    except ConfigError as exc:
        raise CliError("config", str(exc)) from exc
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"parameter": result.parameter, "grid": result.grid, "rmse": result.rmse,
               "argmin": result.argmin, "reference_argmin": result.reference,
               "config_hash": cfg.hash()}
    (out / f"grid_{args.param}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    emit_plot_data({"model_rmse": {}, "turbine_rmse": {}}, [], out / "plots", grids=[result])
    for t, v in result.argmin.items():
        print(f"{t}: best {args.param} = {v} (reference {result.reference.get(t)})")


def cmd_ablate(args):
    cfg = _config(args)
    splits, data_hash = _frames(cfg)
    runner = AblationRunner(cfg, splits, data_hash)
    try:
        report = runner.run()
    except ConfigError as exc:
        raise CliError("config", str(exc)) from exc
    try:
        summary = emit_report(report, cfg.out_dir)
    except OSError as exc:
        raise CliError("report", str(exc)) from exc
    for m, v in summary["mean_rmse"].items():
        print(f"{m:8s} mean RMSE {v:.4f}")
    if report.failures:
        for f in report.failures:
            print(f"failed cell {f['model']}/{f['turbine']}/h{f['horizon']}: {f['error']}", file=sys.stderr)
        raise CliError("ablate", f"{len(report.failures)} cells failed")


def cmd_report(args):
    run_dir = Path(args.run_dir)
    try:
        rows = read_metric_rows(run_dir / "metrics.csv", run_dir / "timings.csv")
        manifest = json.loads((run_dir / "manifest.json").read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise CliError("report", f"cannot read run in {run_dir}: {exc}") from exc
    roster = manifest["config"]["roster"]
    turbines = manifest["config"]["turbines"]
    summary = summarize(rows, roster, turbines)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    emit_plot_data(summary, rows, run_dir / "plots")
    for m, v in summary["mean_rmse"].items():
        print(f"{m:8s} mean RMSE {v:.4f}")


def build_parser():
    p = argparse.ArgumentParser(prog="windkd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fast=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config file)")
        sp.add_argument("--out", help="output directory (overrides the config file)")
        if fast:
            sp.add_argument("--fast", action="store_true", help="shrink data and epochs for a smoke run")

    common(sub.add_parser("synth", help="write synthetic park CSV files"), fast=False)
    common(sub.add_parser("train-park", help="train the park models"))
    g = sub.add_parser("grid-search", help="sweep alpha or gamma")
    common(g)
    g.add_argument("--param", choices=("alpha", "gamma"), required=True)
    g.add_argument("--grid", help="start:stop:step or comma list, e.g. 0:1:0.2")
    common(sub.add_parser("ablate", help="run the six-model ablation"))
    r = sub.add_parser("report", help="rebuild summaries from an ablation run")
    r.add_argument("run_dir")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train-park": cmd_train_park,
    "grid-search": cmd_grid_search,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        print(f"windkd: [{exc.stage}] {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.stage, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
