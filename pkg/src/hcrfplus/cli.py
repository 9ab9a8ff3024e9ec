"""Command-line entry point: synth, train, predict, evaluate, crossval, gradcheck.

Tables are tab-separated with one header line; floats are written with
``repr`` so reruns are byte-identical.  Exit codes: 0 success, 2
configuration error, 3 schema error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import sys
from dataclasses import fields

import numpy as np

from .data import SynthSpec, load_bundle, load_dataset, save_bundle, save_dataset, synth_generate
from .errors import ConfigurationError, HcrfError, InvalidInputError, NumericalFailureError
from .evaluation import (DEFAULT_HIDDEN_SWEEP, DEFAULT_SIGMA_GRID, crossval, gradcheck, score)
from .inference import PREDICT_MODES
from .pipeline import VARIANTS, TrainSettings, fit_pipeline, predict_with_bundle

log = logging.getLogger("hcrfplus")


def _num(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@contextlib.contextmanager
def _open_out(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _write_table(path, header, rows):
    with _open_out(path) as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(_num(v) for v in r) + "\n")


def _int_list(text: str) -> list:
    """``3-20`` or ``3,5,8`` (ranges inclusive)."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"not an integer list: {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _float_list(text: str) -> list:
    try:
        out = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number list: {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _variant_list(text: str) -> list:
    out = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in out if v not in VARIANTS]
    if bad or not out:
        raise argparse.ArgumentTypeError(
            f"unknown variant(s) {', '.join(bad) or '(none)'}; choose from {', '.join(VARIANTS)}")
    return out


def _settings(args, **override) -> TrainSettings:
    kw = dict(variant=getattr(args, "variant", "ml-hcrf+"), n_hidden=getattr(args, "n_hidden", 5),
              sigma=getattr(args, "sigma", 1.0), max_iters=args.max_iters,
              codebook_k=args.codebook_k, nu=args.nu, fusion=args.fusion, seed=args.seed,
              bundle_size=args.bundle_size)
    kw.update(override)
    return TrainSettings(**kw)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    names = [f.name for f in fields(SynthSpec)]
    try:
        spec = SynthSpec(**{n: getattr(args, n) for n in names})
    except InvalidInputError as exc:
        raise ConfigurationError(f"invalid synthetic spec: {exc}") from exc
    ds = synth_generate(spec)
    save_dataset(ds, args.output, header="synth " + json.dumps(spec.to_dict(), sort_keys=True))
    log.info("wrote %d sequences to %s", len(ds), args.output)
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    settings = _settings(args)
    try:
        bundle = fit_pipeline(ds, settings)
    except NumericalFailureError as exc:
        if exc.report is not None:
            report = exc.report.to_dict() if hasattr(exc.report, "to_dict") else exc.report
            print(json.dumps({"error": str(exc), "report": report}, sort_keys=True),
                  file=sys.stderr)
        raise
    save_bundle(bundle, args.output)
    rep = bundle.training_meta["report"]
    log.info("trained %s: %d iterations, objective %.6g, converged=%s", settings.variant,
             rep["iterations"], rep["objective_trace"][-1], rep["converged"])
    return 0


def _predictions(args):
    bundle = load_bundle(args.model)
    ds = load_dataset(args.data)
    labels, logp = predict_with_bundle(bundle, ds, args.mode, args.n_draws, args.seed)
    return bundle, ds, labels, logp


def cmd_predict(args) -> int:
    bundle, ds, labels, logp = _predictions(args)
    header = ["id", "label"] + [f"logp_{c}" for c in range(logp.shape[1])]
    rows = ([s.id, int(y)] + [float(v) for v in lp] for s, y, lp in zip(ds.samples, labels, logp))
    _write_table(args.output, header, rows)
    return 0


def cmd_evaluate(args) -> int:
    bundle, ds, labels, _ = _predictions(args)
    L = bundle.dims.n_labels
    sc = score(ds.labels, labels, L)
    header = ["class", "support", "recall"] + [f"pred_{c}" for c in range(L)]
    rows = [[c, int(sc.support[c]), float(sc.recall[c])] + [int(v) for v in sc.confusion[c]]
            for c in range(L)]
    rows.append(["all", int(sc.support.sum()), sc.accuracy]
                + [int(v) for v in sc.confusion.sum(axis=0)])
    _write_table(args.output, header, rows)
    return 0


def cmd_crossval(args) -> int:
    ds = load_dataset(args.data)
    base = _settings(args, n_hidden=args.n_hidden[0], sigma=args.sigma[0])
    cells, audits = crossval(ds, args.variants, args.n_hidden, args.sigma, args.folds, args.seed,
                             base, args.mode, args.n_draws, shuffle=not args.no_shuffle)
    header = ["variant", "n_hidden", "sigma", "mean", "std"] + [f"fold_{k}"
                                                                for k in range(args.folds)]
    rows = [[c.variant, c.n_hidden, c.sigma, c.mean, c.std] + c.fold_accuracy for c in cells]
    # average over every examined configuration, per variant
    for v in args.variants:
        accs = np.array([c.fold_accuracy for c in cells if c.variant == v])
        rows.append([v, "all", "all", float(accs.mean()), float(accs.mean(axis=0).std())]
                    + [float(a) for a in accs.mean(axis=0)])
    _write_table(args.output, header, rows)
    if args.audit:
        _write_table(args.audit, ["fold", "n_train", "n_test", "overlap", "norm_fingerprint",
                                  "x_mean", "x_std"],
                     ([a.fold, len(a.train_ids), len(a.test_ids),
                       len(set(a.train_ids) & set(a.test_ids)), a.fingerprint,
                       ",".join(_num(v) for v in a.x_mean), ",".join(_num(v) for v in a.x_std)]
                      for a in audits))
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck(args.instances, args.seed, args.step, corrupt=args.corrupt_gradient)
    _write_table(args.output, ["instance", "check", "n_labels", "n_hidden", "length", "rel_error"],
                 ([r.instance, r.check, r.n_labels, r.n_hidden, r.length, r.rel_error]
                  for r in rows))
    errs = [r.rel_error for r in rows if not math.isnan(r.rel_error)]
    worst = max(errs) if errs else 0.0
    skipped = len(rows) - len(errs)
    print(f"max relative error {worst:.3e} over {len(errs)} checks ({skipped} skipped at kinks)",
          file=sys.stderr)
    if worst > args.tol:
        raise NumericalFailureError(f"gradient check failed: {worst:.3e} > {args.tol:g}")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_training_flags(p):
    p.add_argument("--max-iters", type=int, default=400)
    p.add_argument("--codebook-k", type=int, default=256,
                   help="privileged codebook size (clamped to the number of distinct frames)")
    p.add_argument("--nu", type=float, default=None,
                   help="fix the Student t degrees of freedom instead of estimating them")
    p.add_argument("--fusion", action="store_true",
                   help="fill missing privileged channels by ridge regression on the regular one")
    p.add_argument("--bundle-size", type=int, default=20,
                   help="cutting planes kept by the max-margin trainer; 0 uses plain subgradient")


def _add_prediction_flags(p):
    p.add_argument("--mode", choices=PREDICT_MODES, default="codebook")
    p.add_argument("--n-draws", type=int, default=10_000, help="Monte-Carlo draws per frame")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hcrfplus", description="Hidden CRFs with privileged information.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    defaults = SynthSpec()
    for f in fields(SynthSpec):
        p.add_argument("--" + f.name.replace("_", "-"), type=type(getattr(defaults, f.name)),
                       default=getattr(defaults, f.name))
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model and write a bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="ml-hcrf+")
    p.add_argument("--n-hidden", type=int, default=5)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    _add_training_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("predict", cmd_predict, "per-sample labels and log-posteriors"),
                             ("evaluate", cmd_evaluate, "accuracy and confusion matrix")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--seed", type=int, default=0)
        _add_prediction_flags(p)
        p.add_argument("-o", "--output", default="-")
        p.set_defaults(func=func)

    p = sub.add_parser("crossval", help="stratified k-fold grid over variants, H and sigma")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", type=_variant_list, default=["ml-hcrf+", "hcrf-regular"])
    p.add_argument("--n-hidden", type=_int_list, default=list(DEFAULT_HIDDEN_SWEEP),
                   help="list such as 3-20 or 3,5,8")
    p.add_argument("--sigma", type=_float_list, default=list(DEFAULT_SIGMA_GRID))
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--no-shuffle", action="store_true",
                   help="deal folds in file order instead of a seeded permutation")
    p.add_argument("--seed", type=int, default=0)
    _add_training_flags(p)
    _add_prediction_flags(p)
    p.add_argument("--audit", help="write per-fold normalisation statistics here")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HcrfError as exc:
        print(f"hcrfplus {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hcrfplus {args.command}: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
