"""Command-line entry point: ``faircpd <command> [options]``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import audit, bcd, datasets, experiments as ex, tensor
from .errors import DivergenceError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default="synthetic",
                   help="synthetic, contraceptive, counterexample or a saved dataset directory")
    p.add_argument("--cmc-path", default=None, help="path to cmc.data (default: $%s)" % datasets.CMC_ENV)
    p.add_argument("--small", action="store_true", help="desk-scale 60x30x30 synthetic tensor")
    p.add_argument("--preset", default=None, help=f"one of {', '.join(ex.PRESETS)} or a JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help=f"output directory (default: ${ex.OUT_ENV} or ./results)")
    p.add_argument("--json", action="store_true", help="print machine-readable JSON")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", default=None, choices=sorted(bcd.METHODS), type=str.upper)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="regularization strength (lambda_o for FATR)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--inner-steps", type=int, default=None)
    p.add_argument("--lr-a", type=float, default=None)
    p.add_argument("--lr-bc", type=float, default=None)
    p.add_argument("--rank", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faircpd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate and save the synthetic dataset")
    _add_common(p)

    p = sub.add_parser("fit", help="fit one model, audit it and save the artifacts")
    _add_common(p)
    _add_train(p)

    p = sub.add_parser("sweep", help="regularization sweep, writes sweep.csv")
    _add_common(p)
    _add_train(p)
    p.add_argument("--grid", default=None, help="lo:hi:count or a comma-separated list of lambdas")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--gnuplot", action="store_true", help="also write a gnuplot script")

    p = sub.add_parser("compare", help="compare methods over seeded repeats")
    _add_common(p)
    _add_train(p)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("counterexample", help="orthogonal-but-separable demonstration")
    p.add_argument("--json", action="store_true")
    p.add_argument("--width", type=int, default=2)

    p = sub.add_parser("audit", help="audit the sensitive-mode factor of a saved model")
    _add_common(p)
    p.add_argument("--model", required=True, help="directory holding factor_a.txt")
    p.add_argument("--train-fraction", type=float, default=None)
    return parser


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(ex.OUT_ENV) or "results")


def _parse_grid(text: str):
    if ":" in text:
        lo, hi, count = text.split(":")
        return ex.linear_grid(float(lo), float(hi), int(count))
    return tuple(float(v) for v in text.split(","))


def _train_overrides(args) -> dict:
    names = {"epochs": "epochs", "inner_steps": "inner_steps", "lr_a": "lr_a", "lr_bc": "lr_bc",
             "rank": "rank"}
    return {field: getattr(args, attr) for attr, field in names.items()
            if getattr(args, attr, None) is not None}


def _spec(args, default_lambda=None) -> ex.SweepSpec:
    """Preset (if any) with command-line overrides applied."""
    method_arg = getattr(args, "method", None)
    if args.preset:
        d = ex.load_preset_dict(args.preset, small=args.small)
    else:
        method = method_arg or "BCD"
        d = {"dataset": {"name": args.dataset}, "methods": {method: {}}}
        if args.dataset == "synthetic" and args.small:
            d["dataset"]["small"] = True
    if args.cmc_path:
        d.setdefault("dataset", {})["path"] = args.cmc_path
    if method_arg:
        if method_arg not in d["methods"]:
            if args.preset:
                raise SystemExit(f"method {method_arg} is not part of preset {args.preset}")
            d["methods"] = {method_arg: {}}
        d["methods"] = {method_arg: d["methods"][method_arg]}
    over = _train_overrides(args)
    if over:
        d["train"] = dict(d.get("train", {}), **over)
        for entry in d["methods"].values():
            entry["train"] = dict(entry.get("train", {}), **over)
    lam = getattr(args, "lam", None)
    lam = lam if lam is not None else default_lambda
    grid = getattr(args, "grid", None)
    for entry in d["methods"].values():
        if grid:
            entry.pop("lambda", None)
            entry["grid"] = list(_parse_grid(grid))
        elif lam is not None:
            entry.pop("grid", None)
            entry["lambda"] = lam
    if getattr(args, "repeats", None) is not None:
        d["repeats"] = args.repeats
    if args.seed is not None:
        d["seed"] = args.seed
    return ex.spec_from_dict(d)


def cmd_gen_synth(args) -> int:
    seed = args.seed or 0
    spec = datasets.SyntheticSpec.small(seed) if args.small else datasets.SyntheticSpec(seed=seed)
    ds = datasets.gen_synthetic(spec)
    out = _out_dir(args)
    ds.save(out)
    tensor.save_model(out / "truth", ds.truth)
    print(json.dumps({"out": str(out), "shape": list(ds.x.shape)}) if args.json else f"wrote {out}")
    return 0


def cmd_fit(args) -> int:
    spec = _spec(args, default_lambda=None)
    if len(spec.arms) != 1:
        raise SystemExit("fit needs a single method; pass --method")
    arm = spec.arms[0]
    if len(arm.lambdas) != 1:
        raise SystemExit("fit needs a single lambda; pass --lambda")
    out = _out_dir(args)
    try:
        res = ex.cmd_fit(spec.dataset, arm.method, arm.lambdas[0], arm.train, spec.audit, out, spec.seed)
    except DivergenceError as exc:
        print(f"diverged: {exc} (epoch {exc.epoch})", file=sys.stderr)
        return 3
    rec = res.record
    if args.json:
        print(json.dumps(dict(zip(ex.METRICS_HEADER.split(","), rec.to_row()))))
    else:
        print(ex.format_metrics([rec]), end="")
    return 0


def cmd_sweep(args) -> int:
    spec = _spec(args)
    results = ex.cmd_sweep(spec, _out_dir(args), jobs=args.jobs, gnuplot=args.gnuplot)
    bad = sum(r.error is not None for r in results)
    msg = {"rows": len(results), "diverged": bad, "csv": str(_out_dir(args) / "sweep.csv")}
    print(json.dumps(msg) if args.json else f"{msg['rows']} rows ({bad} diverged) -> {msg['csv']}")
    return 0


def cmd_compare(args) -> int:
    spec = _spec(args)
    rows = ex.cmd_compare(spec, _out_dir(args), jobs=args.jobs)
    if args.json:
        print(json.dumps([dict(zip(ex.SUMMARY_FIELDS, (getattr(r, f) for f in ex.SUMMARY_FIELDS)))
                          for r in rows]))
    else:
        print(ex.summary_table(rows))
    return 0


def cmd_counterexample(args) -> int:
    report = ex.cmd_counterexample(args.width)
    print(report.to_json() if args.json else report.text())
    return 0 if report.passed else 1


def cmd_audit(args) -> int:
    spec = _spec(args, default_lambda=0.0)
    data = spec.dataset.load(spec.seed)
    a = tensor.load_model(args.model).a
    cfg = spec.audit
    if args.train_fraction is not None:
        cfg = replace(cfg, train_fraction=args.train_fraction)
    res = audit.unfairness(a, data.labels, replace(cfg, seed=spec.seed))
    if args.json:
        print(json.dumps({"accuracy": res.accuracy, "unfairness": res.unfairness,
                          "majority_floor": res.majority_floor, "n_test": res.n_test,
                          "warnings": list(res.warnings)}))
    else:
        print(audit.AUDIT_CSV_HEADER)
        print(res.csv_row("audit", 0.0), end="")
        for w in res.warnings:
            print(f"warning: {w}", file=sys.stderr)
    return 0


COMMANDS = {"gen-synth": cmd_gen_synth, "fit": cmd_fit, "sweep": cmd_sweep, "compare": cmd_compare,
            "counterexample": cmd_counterexample, "audit": cmd_audit}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
