"""Command-line entry point: ``itergp {train,diagnose,compare-oracle,predict}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import apply_standardisation, load_table
from .experiments import (
    ConfigError,
    difference_histogram,
    load_config,
    run_compare_oracle,
    run_diagnose,
    run_train,
    summary_document,
    trace_header,
    trace_rows,
)
from .kernels import Hyperparameters
from .optim import SolverFailure
from .posterior import PosteriorHandle, test_metrics
from .rff import RFFBasis, RFFPrior

log = logging.getLogger("itergp")

EXIT_OK, EXIT_ABORT, EXIT_CONFIG = 0, 1, 2


def _seed_override(text):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=INT, got {text!r}")
    try:
        return name.strip(), int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed value must be an integer, got {value!r}") from None


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, allow_nan=True) + "\n", encoding="utf-8")


def _fmt(v):
    return repr(float(v))


def cmd_train(args, cfg) -> int:
    try:
        result, train, test = run_train(cfg)
    except SolverFailure as exc:
        log.error("aborted: %s", exc)
        return EXIT_ABORT
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "trace.csv", trace_header(train.d), trace_rows(result.trace))
    _write_csv(
        out / "timings.csv",
        ["step", "solver_seconds", "total_seconds"],
        [[str(r.step), _fmt(r.solver_seconds), _fmt(r.total_seconds)] for r in result.trace],
    )
    _write_json(out / "summary.json", summary_document(cfg, result, train, test))
    h = result.posterior
    arrays = dict(
        inputs=train.inputs,
        raw=result.hyperparameters.raw,
        feature_mean=train.feature_mean,
        feature_scale=train.feature_scale,
        target_stats=np.array([train.target_mean, train.target_scale]),
    )
    if h is not None:
        arrays.update(v_y=h.v_y, zhat=h.zhat)
        if isinstance(h.prior, RFFPrior):
            arrays.update(rff_frequencies=h.prior.basis.base_frequencies, rff_weights=h.prior.basis.weights)
    np.savez(out / "posterior.npz", **arrays)
    final = result.final_metrics
    if final is not None:
        log.info("final test rmse %.4f, llh %s", final.rmse_raw, final.llh)
    return EXIT_OK


def cmd_predict(args, cfg=None) -> int:
    run = Path(args.out)
    try:
        summary = json.loads((run / "summary.json").read_text(encoding="utf-8"))
        saved = np.load(run / "posterior.npz")
    except OSError as exc:
        raise ConfigError(f"cannot load a trained run from {run}: {exc}") from None
    if "v_y" not in saved:
        raise ConfigError(f"{run} holds no posterior solutions")
    data = summary["config"]["data"]
    table = load_table(args.data, data["target"], data["delimiter"])
    tmean, tscale = saved["target_stats"]
    test = apply_standardisation(table, saved["feature_mean"], saved["feature_scale"], tmean, tscale)
    hp = Hyperparameters(saved["raw"])
    prior = zhat = None
    if "rff_frequencies" in saved:
        prior = RFFPrior(RFFBasis(saved["rff_frequencies"], saved["rff_weights"], 0))
        zhat = saved["zhat"]
    handle = PosteriorHandle(saved["inputs"], hp, saved["v_y"], prior, zhat)
    m = test_metrics(handle, test.inputs, test.targets, test.target_scale)
    doc = {"n": test.n, "rmse": m.rmse, "llh": m.llh, "rmse_raw": m.rmse_raw, "llh_raw": m.llh_raw}
    _write_json(run / "predict.json", doc)
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_diagnose(args, cfg) -> int:
    table = run_diagnose(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "diagnostics.csv", ["quantity", "value"], [[k, _fmt(v)] for k, v in table.items()])
    for k, v in table.items():
        print(f"{k:24s} {v:.6g}")
    return EXIT_OK


def cmd_compare_oracle(args, cfg) -> int:
    names, diffs = run_compare_oracle(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[str(t), *map(_fmt, row), _fmt(np.max(np.abs(row)))] for t, row in enumerate(diffs)]
    _write_csv(out / "differences.csv", ["step", *names, "max_abs"], rows)
    counts, edges = difference_histogram(diffs)
    hist = [[_fmt(edges[i]), _fmt(edges[i + 1]), str(int(c))] for i, c in enumerate(counts)]
    _write_csv(out / "histogram.csv", ["log10_lo", "log10_hi", "count"], hist)
    worst = float(np.max(np.abs(diffs))) if diffs.size else 0.0
    print(f"steps {len(diffs)}  max |dtheta| {worst:.3e}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "diagnose": cmd_diagnose,
    "compare-oracle": cmd_compare_oracle,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="itergp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "diagnose", "compare-oracle"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed-override", action="append", default=[], type=_seed_override, metavar="NAME=INT")
        p.add_argument("--verbose", "-v", action="store_true")
    p = sub.add_parser("predict", help="re-evaluate a trained run on a new table")
    p.add_argument("--out", required=True, help="directory written by 'train'")
    p.add_argument("--data", required=True, help="delimited table with the training layout")
    p.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "predict":
            return cmd_predict(args)
        cfg = load_config(args.config, dict(args.seed_override))
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError) as exc:
        print(f"itergp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
