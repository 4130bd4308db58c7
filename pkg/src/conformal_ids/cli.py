"""Command-line entry point: ``train``, ``simulate``, ``generate`` and ``report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .chunking import write_trace_csv
from .conformal import STRATEGIES, CalibrationError, load_calibration, save_calibration
from .config import ConfigError, RunConfig, load_config
from .ingest import (FlowTable, IngestionError, Standardizer, align_features, load_flow_csv)
from .metrics import binary_metrics
from .neural import TrainingError, load_model, save_model
from .stream import Pipeline, SimulationError, derive_seed, fit_pipeline, run_simulation
from .synthetic import SpecError, generate_stream, spec_from_dict, write_stream_csv

logger = logging.getLogger("conformal_ids")

EXIT_CODES = {"E_CONFIG": 2, "E_SPEC": 2, "E_DATA": 3, "E_ARTIFACTS": 4, "E_RUNTIME": 5}
TIMING_FIELDS = ("eval_seconds", "retrain_seconds", "runtime_seconds")


class CommandError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- data -------------------------------------------------------------------

def _load_table(csv_path, spec, label_column, what) -> FlowTable:
    if csv_path is not None:
        return load_flow_csv(csv_path, label_column)
    if spec is not None:
        return generate_stream(spec)
    raise ConfigError(f"no {what} data configured (set data.{what}_csv or data.{what}_synthetic)")


def load_tables(cfg: RunConfig, need_stream: bool = True):
    train = _load_table(cfg.data.train_csv, cfg.data.train_synthetic,
                        cfg.data.label_column, "train")
    if not need_stream:
        return train, None
    stream = _load_table(cfg.data.stream_csv, cfg.data.stream_synthetic,
                         cfg.data.label_column, "stream")
    if train.feature_names != stream.feature_names:
        train, stream = align_features(train, stream)
    return train, stream


# -- artifacts --------------------------------------------------------------

def save_pipeline(pipe: Pipeline, directory: Path, manifest: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "standardizer.npz", "wb") as fh:
        np.savez(fh, means=pipe.standardizer.means, stddevs=pipe.standardizer.stddevs)
    save_model(pipe.fnn, directory / "fnn.npz")
    save_calibration(pipe.calibration, directory / "calibration")
    manifest = dict(manifest, feature_names=list(pipe.feature_names))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_pipeline(directory: Path):
    manifest = json.loads((directory / "manifest.json").read_text())
    with np.load(directory / "standardizer.npz") as data:
        std = Standardizer(data["means"].copy(), data["stddevs"].copy())
    pipe = Pipeline(std, load_model(directory / "fnn.npz"),
                    load_calibration(directory / "calibration"),
                    tuple(manifest["feature_names"]))
    return pipe, manifest


def _manifest(cfg: RunConfig) -> dict:
    sim = cfg.sim
    return {"strategy": sim.strategy, "alpha": sim.alpha, "k": sim.k, "seed": sim.seed,
            "ice_split": sim.ice_split,
            "fnn": vars(sim.fnn), "ce_mlp": vars(sim.ce)}


def _train_metrics(pipe: Pipeline, table: FlowTable) -> dict:
    Xs = pipe.standardizer.apply(table.features)
    fnn_pred = np.argmax(pipe.fnn.predict_proba(Xs), axis=1)
    ce_pred = np.argmax(pipe.calibration.predict_proba(Xs), axis=1)
    return {"fnn": binary_metrics(fnn_pred, table.labels),
            "ce_mlp": binary_metrics(ce_pred, table.labels),
            "n_rows": len(table), "n_dropped": table.n_dropped}


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> Path:
    train, _ = load_tables(cfg, need_stream=False)
    seed = derive_seed(cfg.sim.seed, "initial")
    pipe = fit_pipeline(train.features, train.labels, cfg.sim, seed, train.feature_names)
    directory = cfg.artifact_dir
    save_pipeline(pipe, directory, _manifest(cfg))
    _write_json(directory / "train_metrics.json", _train_metrics(pipe, train))
    logger.info("artifacts written to %s", directory)
    return directory


def _pipeline_for(cfg: RunConfig, train: FlowTable):
    directory = cfg.artifact_dir
    if (directory / "manifest.json").is_file():
        pipe, manifest = load_pipeline(directory)
        if manifest == dict(_manifest(cfg), feature_names=manifest.get("feature_names")):
            if tuple(manifest["feature_names"]) != train.feature_names:
                raise CommandError("E_ARTIFACTS", "artifact feature columns do not match data")
            return pipe
        logger.warning("artifacts in %s were built with a different configuration", directory)
    if not cfg.auto_train:
        raise CommandError("E_ARTIFACTS",
                           f"no matching model artifacts in {directory} and auto_train is off")
    logger.info("no matching artifacts; training before simulation")
    cmd_train(cfg)
    return load_pipeline(directory)[0]


def cmd_simulate(cfg: RunConfig) -> dict:
    train, stream = load_tables(cfg)
    pipe = _pipeline_for(cfg, train)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "events.jsonl", "w") as log:
        report = run_simulation(
            train, stream, cfg.sim, pipeline=pipe,
            on_record=lambda rec: log.write(json.dumps(rec, sort_keys=True) + "\n"))
    summary = report.summary()
    summary["data"] = {"train": train.source, "stream": stream.source,
                       "n_features": train.n_features}
    _write_json(out / "summary.json", summary)
    write_trace_csv(report.chunk_sizes, out / "trace.csv")
    logger.info("%s: %d calibrations, CE F1 %.4f, %.1fs", cfg.sim.strategy,
                report.n_calibrations, report.metrics["ce"]["f1"], report.runtime_seconds)
    return summary


def cmd_generate(spec_path: Path, out_path: Path, seed=None) -> Path:
    try:
        data = yaml.safe_load(Path(spec_path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise CommandError("E_SPEC", f"cannot read drift spec {spec_path}: {exc}") from None
    if isinstance(data, dict) and seed is not None:
        data["seed"] = seed
    spec = spec_from_dict(data)
    table = generate_stream(spec)
    write_stream_csv(table, out_path)
    return out_path


def cmd_report(out_dir: Path) -> str:
    summaries = sorted(Path(out_dir).rglob("summary.json"))
    if not summaries:
        raise CommandError("E_DATA", f"no summary.json found under {out_dir}")
    header = (f"{'run':<28} {'strategy':<11} {'CE Acc.':>8} {'Prec.':>7} {'Rec.':>7} "
              f"{'F1':>7} {'Clf F1':>7} {'Runtime(s)':>10} {'# Calibs':>8}")
    lines = [header, "-" * len(header)]
    for path in summaries:
        s = json.loads(path.read_text())
        ce, clf = s["metrics"]["ce"], s["metrics"]["classifier"]
        run = str(path.parent.relative_to(out_dir)) if path.parent != Path(out_dir) else "."
        calibs = s["n_calibrations"] or "No Retrain"
        lines.append(f"{run:<28} {s['strategy']:<11} {ce['accuracy']:>8.4f} "
                     f"{ce['precision']:>7.4f} {ce['recall']:>7.4f} {ce['f1']:>7.4f} "
                     f"{clf['f1']:>7.4f} {s['runtime_seconds']:>10.2f} {calibs!s:>8}")
    return "\n".join(lines)


# -- argument handling ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conformal-ids",
                                     description="Streaming conformal evaluation for flow-based IDS")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_options=True):
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        if run_options:
            p.add_argument("--strategy", choices=STRATEGIES)
            p.add_argument("--chunking", help="adaptive or fixed:N")
            p.add_argument("--alpha", type=float)
            p.add_argument("--rho", type=float)

    common(sub.add_parser("train", help="train classifier and evaluator, write artifacts"))
    p_sim = sub.add_parser("simulate", help="run the streaming simulation")
    common(p_sim)
    p_sim.add_argument("--sweep-strategies", action="store_true",
                       help="run every evaluator strategy into <out>/<strategy>/")
    p_sim.add_argument("--rho-sweep", help="comma-separated drift thresholds, one run each")
    common(sub.add_parser("generate", help="write a synthetic flow CSV from a drift spec"),
           run_options=False)
    common(sub.add_parser("report", help="tabulate summary.json files under --out"),
           run_options=False)
    return parser


def _run_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "strategy": getattr(args, "strategy", None),
                 "chunking": getattr(args, "chunking", None),
                 "alpha": getattr(args, "alpha", None), "rho": getattr(args, "rho", None),
                 "output": None if args.out is None else str(args.out)}
    return load_config(args.config, overrides)


def _dispatch(args) -> int:
    if args.command == "generate":
        if args.out is None:
            raise ConfigError("generate needs --out PATH for the CSV")
        path = cmd_generate(args.config, args.out, args.seed)
        print(path)
        return 0

    cfg = _run_config(args)
    if args.command == "train":
        print(cmd_train(cfg))
    elif args.command == "simulate":
        runs = [cfg]
        if args.sweep_strategies:
            runs = [replace(cfg, sim=replace(cfg.sim, strategy=s), out_dir=cfg.out_dir / s,
                            artifacts=(cfg.artifacts / s) if cfg.artifacts else None)
                    for s in STRATEGIES]
        if args.rho_sweep:
            try:
                rhos = [float(r) for r in args.rho_sweep.split(",") if r.strip()]
            except ValueError:
                raise ConfigError(f"invalid --rho-sweep {args.rho_sweep!r}") from None
            # rho only affects streaming, so every threshold shares one set of artifacts
            runs = [replace(r, sim=replace(r.sim, rho=rho), out_dir=r.out_dir / f"rho_{rho:g}",
                            artifacts=r.artifact_dir)
                    for r in runs for rho in rhos]
        for run in runs:
            summary = cmd_simulate(run)
            print(f"{run.out_dir}: calibrations={summary['n_calibrations']} "
                  f"ce_f1={summary['metrics']['ce']['f1']:.4f}")
    elif args.command == "report":
        print(cmd_report(cfg.out_dir))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except CommandError as exc:
        code, message = exc.code, str(exc)
    except SpecError as exc:
        code, message = "E_SPEC", str(exc)
    except (IngestionError, CalibrationError) as exc:
        code, message = "E_DATA", str(exc)
    except ValueError as exc:
        code, message = "E_CONFIG", str(exc)
    except (SimulationError, TrainingError) as exc:
        code, message = "E_RUNTIME", str(exc)
    print(f"error[{code}]: {message}", file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
