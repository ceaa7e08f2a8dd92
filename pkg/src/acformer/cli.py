"""``acformer`` command line: train, eval, synth, analyze, rerun.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 training divergence.
Each command writes ``manifest.json`` into ``--out`` before doing any work;
``acformer rerun --manifest PATH`` repeats the recorded run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, checkpoint, synthetic
from .config import ConfigFileError, RunConfig, dump_config, load_run_config
from .data import DataError, load_csv
from .experiment import analysis_samples, prepare, resolve_channels, train_forecaster
from .model import ABLATIONS, ConfigError, check_config
from .tensor import ConfigurationError
from .training import TrainingDivergence

log = logging.getLogger("acformer")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3
MODES = ("rf", "va", "attn", "corr")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def thread_count() -> int:
    raw = os.environ.get("ACFORMER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"ACFORMER_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(EXIT_CONFIG, f"ACFORMER_THREADS must be a positive integer, got {raw!r}")
    return n


def write_manifest(out: Path, command: str, cfg: RunConfig, args: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _json(out / "manifest.json", {
        "command": command,
        "args": args,
        "config": cfg.to_dict(),
        "acformer_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    })


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError(EXIT_CONFIG, f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_DATA, f"{what} file not found: {p}")
    return p


def _load_checkpoint(path: str | None):
    p = _require(path, "checkpoint")
    try:
        return checkpoint.load(p)
    except checkpoint.CheckpointError as exc:
        raise CliError(EXIT_DATA, f"{p}: {exc}") from exc


# -- commands ----------------------------------------------------------------

def cmd_train(cfg: RunConfig, args: dict, out: Path) -> None:
    prep = prepare(cfg, _require(args["data"], "data"))
    cfg = resolve_channels(cfg, prep.raw)
    model, report = train_forecaster(cfg, prep)
    checkpoint.save(model, out / "model.acfm")
    (out / "config.resolved").write_text(dump_config(cfg), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(timing=False), encoding="utf-8")
    log.info("trained in %.1f s", report.wall_seconds)
    log.info("test mse=%.4f mae=%.4f", report.test["mse"], report.test["mae"])


def cmd_eval(cfg: RunConfig, args: dict, out: Path) -> None:
    from .training import evaluate

    model = _load_checkpoint(args["checkpoint"])
    cfg = cfg.replace(seq_len=model.cfg.seq_len, pred_len=model.cfg.pred_len)
    prep = prepare(cfg, _require(args["data"], "data"))
    if prep.raw.n_channels != model.cfg.n_channels:
        raise CliError(EXIT_DATA, f"checkpoint expects {model.cfg.n_channels} channels, data has {prep.raw.n_channels}")
    seg = prep.split.segment(prep.data, "test")
    metrics = evaluate(model, seg, model.cfg.seq_len, model.cfg.pred_len, cfg.train.eval_batch_size)
    _json(out / "metrics.json", metrics)
    log.info("test mse=%.4f mae=%.4f", metrics["mse"], metrics["mae"])


def cmd_synth(cfg: RunConfig, args: dict, out: Path) -> None:
    sc = cfg.synth
    start = time.perf_counter()
    results = synthetic.run_residual_experiment(
        cfg.seed, sc.n_train, sc.n_eval, sc.synth_len, sc.synth_epochs, sc.synth_batch_size,
        lr=cfg.train.lr, threads=thread_count())
    with open(out / "tables1_2.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "enc", "proj", "dec", "mae", "mse", "seed"], lineterminator="\n")
        w.writeheader()
        for r in results:
            row = r.row()
            row["mae"], row["mse"] = format(row["mae"], ".17g"), format(row["mse"], ".17g")
            w.writerow(row)
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for r in results:
        if r.trace is None:
            continue
        with open(traces / f"{r.variant.label.replace('/', '-')}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "t", "s", "eps", "eps_hat"])
            for i, (s, e, h) in enumerate(r.trace):
                for t in range(len(s)):
                    w.writerow([i, t, format(s[t], ".17g"), format(e[t], ".17g"), format(h[t], ".17g")])
    _json(out / "synth_report.json", {
        r.variant.label: {"n_params": r.n_params, "status": r.status, "train_mse": r.losses} for r in results})
    log.info("synthetic study finished in %.1f s", time.perf_counter() - start)
    diverged = [r.variant.label for r in results if r.status != "ok"]
    if diverged:
        raise CliError(EXIT_DIVERGED, f"training diverged for variant(s) {', '.join(diverged)}")


def cmd_analyze(cfg: RunConfig, args: dict, out: Path) -> None:
    mode = args["mode"]
    data_path = _require(args["data"], "data")
    if mode == "corr":
        ds = load_csv(data_path).head(cfg.data_rows)
        analysis.write_grid(out / "correlation.csv", analysis.channel_correlation(ds.values), ds.columns)
        return
    model = _load_checkpoint(args["checkpoint"])
    if mode == "attn" and not model.cfg.use_attention:
        raise CliError(EXIT_CONFIG, "attention dump requested but the checkpoint was trained without attention")
    cfg = cfg.replace(seq_len=model.cfg.seq_len, pred_len=model.cfg.pred_len)
    prep = prepare(cfg, data_path)
    names = prep.raw.columns
    if prep.raw.n_channels != model.cfg.n_channels:
        raise CliError(EXIT_DATA, f"checkpoint expects {model.cfg.n_channels} channels, data has {prep.raw.n_channels}")
    n = args["samples"] if args["samples"] is not None else cfg.rf_samples
    ids, xs = analysis_samples(prep, n, cfg.seed)
    if mode == "attn":
        analysis.write_attention(out / "attention.csv", analysis.attention_map_dump(model, xs), names)
        return
    field = analysis.individual_receptive_field(model, xs, ids, model_id=args["checkpoint"])
    if mode == "rf":
        analysis.write_ig_long(out / "ig.csv", field, names)
        analysis.write_ig_raw(out / "ig_raw.csv", field, names)
        g = np.mean([analysis.conventional_receptive_field(model, x) for x in xs], axis=0)
        with open(out / "conventional_rf.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["s", "value"])
            for s, v in enumerate(g):
                w.writerow([s, format(float(v), ".17g")])
    else:
        analysis.write_grid(out / "va.csv", analysis.variance_attention(field).va, names)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "synth": cmd_synth, "analyze": cmd_analyze}


# -- argument handling ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acformer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"acformer {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="CSV with a timestamp column followed by numeric channels")

    p = sub.add_parser("train", help="train a forecaster and report test metrics")
    common(p)
    p.add_argument("--ablation", choices=ABLATIONS)
    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint")
    p = sub.add_parser("synth", help="residual-extraction study on synthetic series")
    common(p, data=False)
    p = sub.add_parser("analyze", help="receptive-field, variance-attention, attention or correlation dumps")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--samples", type=int, help="number of test windows (default: rf_samples)")
    p = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory (default: the recorded one)")
    return parser


def _dispatch(command: str, cfg: RunConfig, args: dict) -> None:
    try:
        if command == "train":
            check_config(cfg.model.with_ablation(cfg.ablation))
    except ConfigurationError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    out = Path(args["out"])
    write_manifest(out, command, cfg, args)
    COMMANDS[command](cfg, args, out)


def run(argv: list[str] | None = None) -> None:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if ns.command == "rerun":
        mpath = Path(ns.manifest)
        if not mpath.exists():
            raise CliError(EXIT_DATA, f"manifest not found: {mpath}")
        try:
            manifest = json.loads(mpath.read_text(encoding="utf-8"))
            cfg = RunConfig.from_dict(manifest["config"])
            args = dict(manifest["args"])
            command = manifest["command"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_CONFIG, f"{mpath}: unreadable manifest ({exc})") from exc
        if ns.out is not None:
            args["out"] = ns.out
        _dispatch(command, cfg, args)
        return
    overrides = {"seed": ns.seed, "ablation": getattr(ns, "ablation", None)}
    cfg = load_run_config(ns.config, **overrides)
    args = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "seed", "ablation")}
    for key in ("config", "data", "checkpoint"):
        if args.get(key) is not None:
            args[key] = str(Path(args[key]).resolve())
    _dispatch(ns.command, cfg, args)


def main(argv: list[str] | None = None) -> int:
    try:
        run(argv)
    except CliError as exc:
        print(f"acformer: error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigFileError, ConfigError, ConfigurationError) as exc:
        print(f"acformer: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"acformer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"acformer: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
