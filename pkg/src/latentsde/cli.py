"""Command-line entry point.

Subcommands: generate (synthetic dataset), train (fit, distill, calibrate),
predict (point forecasts with conformal intervals), ablate (component
knockout grid), allocate (Kelly weights from predictions), validate
(dataset integrity and realism gates).

Exit codes: 0 success, 1 hard error, 2 soft validation failure (artifacts
are still written). BLAS thread pools are pinned to one thread so outputs
are byte-identical regardless of host core count.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import ContractViolation
from .conformal import AllocationProblem, CalibrationSet, adaptive_quantile, kelly_allocate, split_quantile
from .config import echo_config, load_config
from .dataio import read_checkpoint, read_split_dataset, write_checkpoint, write_split_dataset
from .dslob import generate_dslob, validate_synthetic
from .model import params_from_blocks, params_to_blocks
from .train import ablation_rows, distill, predict, pretrain, run_ablation

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_SOFT_FAIL = 2


def _fmt(v):
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        dataset, report, fitted = generate_dslob(cfg.dslob)
    manifest_extra = {
        "spec": asdict(cfg.dslob),
        "fitted": {k: asdict(v) for k, v in fitted.items()},
        "validation": asdict(report),
    }
    write_split_dataset(out, dataset, manifest_extra)
    echo_config(cfg, out)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if not report.passed:
        print("validation gates soft-failed; dataset written anyway", file=sys.stderr)
        return EXIT_SOFT_FAIL
    return EXIT_OK


def _save_model(out, params):
    write_checkpoint(out / "checkpoint.artp", params_to_blocks(params))


def _load_model(model_dir):
    return params_from_blocks(read_checkpoint(Path(model_dir) / "checkpoint.artp"))


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    dataset = read_split_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = pretrain(dataset, cfg.train)
    params = result.params
    _save_model(out, params)
    _write_csv(out / "history.csv", result.history,
               ["epoch", "forecast", "pde", "mpr", "consistency", "total",
                "val_forecast", "lr"])
    head, lib, expression = distill(params, dataset, cfg.train)
    with open(out / "expression.txt", "w") as f:
        f.write(expression + "\n")
    xw_va, y_va = dataset.subset("val")
    resid = np.abs(y_va - predict(params, xw_va, cfg.train))
    cal = CalibrationSet(np.sort(resid))
    q = split_quantile(cal, cfg.conformal.alpha)
    _write_json(out / "calibration.json", {
        "alpha": cfg.conformal.alpha,
        "quantile": q,
        "residuals": [float(r) for r in cal.residuals],
    })
    echo_config(cfg, out)
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = load_config(args.config, args.set)
    dataset = read_split_dataset(args.data)
    params = _load_model(args.model)
    with open(Path(args.model) / "calibration.json") as f:
        calibration = json.load(f)
    # the coverage level comes from the prediction-time config; the stored
    # residuals are reused, so alpha can differ from the one used at training
    alpha = cfg.conformal.alpha
    cal = CalibrationSet(np.asarray(calibration["residuals"]))
    q0 = split_quantile(cal, alpha)
    xw, y = dataset.subset(args.split)
    y_hat = predict(params, xw, cfg.train)
    if args.adaptive:
        resid = np.abs(y - y_hat)
        q_next = adaptive_quantile(resid, args.adaptive, alpha)
        # interval for row t uses residuals up to t-1, seeded by calibration
        q = np.empty(len(y_hat))
        q[0] = q0
        q[1:] = q_next[:-1]
    else:
        q = np.full(len(y_hat), q0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"index": i, "y_hat": float(y_hat[i]), "lo": float(y_hat[i] - q[i]),
             "hi": float(y_hat[i] + q[i]), "target": float(y[i])}
            for i in range(len(y_hat))]
    _write_csv(out / "predictions.csv", rows, ["index", "y_hat", "lo", "hi", "target"])
    echo_config(cfg, out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    dataset = read_split_dataset(args.data)
    results = run_ablation(dataset, cfg.train)
    rows = ablation_rows(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["variant", "rmse", "rank_ic", "dir_acc", "weighted_r2"]
    _write_csv(out / "ablation.csv", rows, cols)
    _write_json(out / "ablation.json", rows)
    echo_config(cfg, out)
    return EXIT_OK


def cmd_allocate(args) -> int:
    cfg = load_config(args.config, args.set)
    with open(args.predictions, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ContractViolation("predictions file is empty")
    mu = np.array([float(r["y_hat"]) for r in rows])
    half = np.array([(float(r["hi"]) - float(r["lo"])) / 2.0 for r in rows])
    problem = AllocationProblem(mu_hat=mu, sigma_hat=half ** 2,
                                gamma=cfg.allocate.gamma)
    weights = kelly_allocate(problem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "weights.csv",
               [{"index": r.get("index", i), "weight": float(w)}
                for i, (r, w) in enumerate(zip(rows, weights))],
               ["index", "weight"])
    echo_config(cfg, out)
    return EXIT_OK


def cmd_validate(args) -> int:
    src = Path(args.data)
    with open(src / "manifest.json") as f:
        manifest = json.load(f)
    dataset = read_split_dataset(src)
    problems = []
    if not np.all(np.isfinite(dataset.windows)) or not np.all(np.isfinite(dataset.targets)):
        problems.append("non-finite values in windows or targets")
    for tag in ("train", "val", "test"):
        w, y = dataset.subset(tag)
        if len(y) != manifest["splits"][tag]["n"]:
            problems.append(f"{tag} split size disagrees with manifest")
    if problems:
        for p in problems:
            print(f"error: {p}", file=sys.stderr)
        return EXIT_ERROR
    report = manifest.get("validation")
    if report is None:
        print("no stored validation report", file=sys.stderr)
        return EXIT_SOFT_FAIL
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["passed"] else EXIT_SOFT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(
        prog="latentsde",
        description="Latent SDE forecasting pipeline on synthetic order-book data")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="plain-text config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")

    p = sub.add_parser("generate", help="synthesize a windowed dataset")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit the model and distill a formula")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecasts with conformal intervals")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="directory written by train")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--adaptive", type=int, default=0, metavar="W",
                   help="rolling-window adaptive intervals (0 = fixed quantile)")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="retrain under component knockouts")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("allocate", help="Kelly weights from predictions.csv")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("validate", help="check a dataset directory")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except (ContractViolation, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
