"""Command-line driver: synth, fit, forecast, evaluate, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import baselines
from .data import (
    DataError,
    SyntheticSpec,
    generate_synthetic,
    ingest_csv,
    load_model,
    read_config,
    save_model,
    spec_to_dict,
    write_csv,
    write_forecast_csv,
    write_truth,
)
from .engine import (
    Hyperparams,
    extract_components,
    fit,
    hyperparams_from_dict,
    predict_slabs,
    suggest_weights,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("stelar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_hyperparam_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model settings (override --config)")
    for f in fields(Hyperparams):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"hp_{f.name}", metavar="V")
    g.add_argument("--config", type=Path, help="key = value file of model settings")
    g.add_argument("--nu-scale", type=float, default=1.0,
                   help="nu as a multiple of the data's weight reference when --nu is unset")


def _hyperparams(args, X: np.ndarray, overrides=None) -> Hyperparams:
    """Defaults, then the config file, then flags; mu and nu default to data-scaled values."""
    values = read_config(args.config) if args.config else {}
    for f in fields(Hyperparams):
        flag = getattr(args, f"hp_{f.name}")
        if flag is not None:
            values[f.name] = flag
    values.update(overrides or {})
    hp = hyperparams_from_dict(values)
    mu, nu = suggest_weights(X, hp.K, nu_scale=args.nu_scale)
    return replace(hp, mu=hp.mu if "mu" in values else mu, nu=hp.nu if "nu" in values else nu)


def _parse_horizons(text: str) -> list[int]:
    try:
        out = [int(h) for h in text.split(",") if h.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --horizons {text!r}") from exc
    if not out or min(out) < 1:
        raise UsageError("horizons must be positive integers")
    return out


def cmd_synth(args) -> int:
    spec = SyntheticSpec(M=args.M, N=args.N, L=args.L, K=args.K, noise_level=args.noise,
                         seed=args.seed, horizon=args.horizon)
    bundle, truth = generate_synthetic(spec, dt.date.fromisoformat(args.start))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(bundle, out / "data.csv")
    write_truth(out / "truth.json", truth)
    (out / "spec.json").write_text(json.dumps(spec_to_dict(spec), indent=1))
    print(f"wrote {spec.M}x{spec.N}x{spec.L} tensor to {out / 'data.csv'}")
    return EXIT_OK


def cmd_fit(args) -> int:
    bundle = ingest_csv(args.input, args.fill_policy)
    hp = _hyperparams(args, bundle.tensor)
    fitted = fit(bundle.tensor, hp)
    save_model(args.model, fitted, bundle)
    print(f"fitted K={hp.K} on {bundle.tensor.shape}: {len(fitted.objective_trace) - 1} "
          f"iterations, best {fitted.best_iteration} ({fitted.stopped_reason})")
    print(f"model written to {args.model}")
    return EXIT_OK


def _labels(labels, fitted):
    M, N, _ = fitted.model.shape
    if labels is None:
        return ([f"loc{m}" for m in range(M)], [f"sig{n}" for n in range(N)],
                [dt.date(2000, 1, 1) + dt.timedelta(days=t) for t in range(fitted.n_total)])
    return labels["locations"], labels["signals"], labels["dates"]


def cmd_forecast(args) -> int:
    fitted, labels = load_model(args.model)
    horizon = args.horizon or fitted.hp.L_o
    pred = predict_slabs(fitted, horizon)
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("forecast contains non-finite values")
    locs, sigs, dates = _labels(labels, fitted)
    future = [dates[-1] + dt.timedelta(days=h) for h in range(1, horizon + 1)]
    write_forecast_csv(args.out, pred, locs, sigs, future)
    print(f"{horizon}-step forecast written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle = ingest_csv(args.input, args.fill_policy)
    X = bundle.tensor
    L = X.shape[2]
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    report = baselines.EvalReport()
    for horizon in _parse_horizons(args.horizons):
        split = baselines.SplitSpec.for_tensor(L, horizon, args.val_len)
        hp = _hyperparams(args, X[:, :, : split.history], {"L_o": str(horizon)})
        available = baselines.default_methods(hp, args.curve_steps)
        unknown = set(names) - set(available)
        if unknown:
            raise UsageError(f"unknown methods: {', '.join(sorted(unknown))}")
        part = baselines.evaluate({n: available[n] for n in names}, X, split,
                                  signal_labels=bundle.signal_labels)
        report.rows.extend(part.rows)
    report.to_csv(args.report)
    print(report.table())
    print(f"report written to {args.report}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    fitted, labels = load_model(args.model)
    comps = extract_components(fitted, args.top_k, args.n_locations, args.n_signals)
    locs, sigs, dates = _labels(labels, fitted)
    doc = [c.to_dict(locs, sigs) for c in comps]
    Path(args.json).write_text(json.dumps(doc, indent=1))
    with open(args.profiles, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date"] + [f"component_{c.index}" for c in comps])
        for t in range(fitted.n_fit):
            w.writerow([dates[t].isoformat()] + [repr(float(c.temporal_profile[t])) for c in comps])
    for c in comps:
        top = ", ".join(d["label"] for d in c.to_dict(locs, sigs)["top_signals"][:3])
        print(f"component {c.index}: weight {c.weight:.4g}; top signals {top}")
    print(f"components written to {args.json}, profiles to {args.profiles}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stelar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic tensor and its ground truth")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--M", type=int, default=20)
    s.add_argument("--N", type=int, default=5)
    s.add_argument("--L", type=int, default=60)
    s.add_argument("--K", type=int, default=3)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--horizon", type=int, default=15, help="extra truth rows past L")
    s.add_argument("--start", default="2020-03-01", help="first date, YYYY-MM-DD")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit a model to a long-format CSV")
    f.add_argument("--input", required=True)
    f.add_argument("--model", required=True, help="output model JSON")
    f.add_argument("--fill-policy", choices=("zero", "error"), default="zero")
    _add_hyperparam_flags(f)
    f.set_defaults(func=cmd_fit)

    fc = sub.add_parser("forecast", help="forecast future slabs from a saved model")
    fc.add_argument("--model", required=True)
    fc.add_argument("--horizon", type=int, help="slabs to forecast (default: the model's L_o)")
    fc.add_argument("--out", required=True)
    fc.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", help="score baselines and the model on held-out slabs")
    e.add_argument("--input", required=True)
    e.add_argument("--horizons", default="10")
    e.add_argument("--val-len", type=int, default=5)
    e.add_argument("--methods", default=",".join(baselines.default_methods(Hyperparams())))
    e.add_argument("--curve-steps", type=int, default=500,
                   help="optimizer steps for the per-series SIR/SEIR fits")
    e.add_argument("--report", required=True, help="output report CSV")
    e.add_argument("--fill-policy", choices=("zero", "error"), default="zero")
    _add_hyperparam_flags(e)
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect", help="export the heaviest components")
    i.add_argument("--model", required=True)
    i.add_argument("--top-k", type=int, default=3)
    i.add_argument("--n-locations", type=int, default=10)
    i.add_argument("--n-signals", type=int, default=5)
    i.add_argument("--json", required=True, help="component summary JSON")
    i.add_argument("--profiles", required=True, help="temporal profile CSV")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
