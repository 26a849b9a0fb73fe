"""Command-line entry point: ``csgpc synth|train|predict|cv|bench``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import __version__
from .harness import (BenchScenario, Standardization, bench, cross_validate,
                      load_csv, load_inputs_csv, synth_clusters, write_csv)
from .model import GPClassifier, ModelConfig
from .ep import SiteParams
from .persist import data_digest, load_model, model_config, parse_config, read_config, save_model

log = logging.getLogger("csgpc")

_HARNESS_KEYS = ("standardize", "folds")
_BENCH_KEYS = ("name", "kinds", "sizes", "seeds", "d", "n_centers", "box_side", "n_test",
               "optimize", "theta", "timing_repeats")


def _settings(args) -> dict[str, str]:
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        values.update(parse_config(item, "--set"))
    for key in ("kind", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    return values


def _flag(values, key, default: bool) -> bool:
    v = values.get(key)
    return default if v is None else v.strip().lower() in ("1", "true", "yes", "on")


def cmd_synth(args) -> int:
    data = synth_clusters(args.n, args.d, args.centers, args.box, args.seed)
    write_csv(args.out, data)
    print(f"wrote {data.n} points to {args.out}")
    return 0


def cmd_train(args) -> int:
    values = _settings(args)
    cfg = model_config(values, ignore=_HARNESS_KEYS)
    data = load_csv(args.data, standardize=_flag(values, "standardize", True))
    clf = GPClassifier(cfg).fit(data.X, data.y)
    fit = clf.fit_
    save_model(args.out, kind=cfg.kind, theta=fit.theta, jitter=cfg.jitter, sites=fit.state.sites,
               X=data.X, y=data.y, training_path=os.path.abspath(args.data),
               standardization=data.standardization)
    print(f"kind={cfg.kind} theta={' '.join(f'{t:.6g}' for t in fit.theta)} "
          f"log_z={fit.state.log_z:.6f} converged={fit.state.converged}")
    print(f"wrote model to {args.out}")
    return 0


def cmd_predict(args) -> int:
    m = load_model(args.model)
    train_path = args.train or m["training_path"]
    data = load_csv(train_path, standardize=m["mean"] is not None)
    if data_digest(data.X, data.y) != m["sha256"]:
        raise SystemExit(f"error: {train_path} does not match the data the model was trained on")
    cfg = ModelConfig(kind=m["kind"], jitter=m["jitter"])
    sites = SiteParams(m["nu_tilde"], m["tau_tilde"], np.zeros(m["n"]))
    clf = GPClassifier.from_sites(cfg, data.X, data.y, m["theta"], sites)
    X_star, y_star = load_inputs_csv(args.data, m["d"])
    if m["mean"] is not None:
        X_star = Standardization(m["mean"], m["scale"]).apply(X_star)
    pred = clf.predict_latent(X_star)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prob", "mean", "variance", "label"])
        for p, mu, v in zip(pred.prob, pred.mean, pred.variance):
            w.writerow([repr(float(p)), repr(float(mu)), repr(float(v)), 1 if p > 0.5 else -1])
    msg = f"wrote {len(pred.prob)} predictions to {args.out}"
    if y_star is not None:
        from .harness import classification_error, nlpd
        msg += (f" (error={classification_error(pred.prob, y_star):.4f}"
                f" nlpd={nlpd(pred.mean, pred.variance, y_star):.4f})")
    print(msg)
    return 0


def cmd_cv(args) -> int:
    values = _settings(args)
    cfg = model_config(values, ignore=_HARNESS_KEYS)
    folds = args.folds or int(values.get("folds", 10))
    data = load_csv(args.data, standardize=_flag(values, "standardize", True))
    res = cross_validate(data, folds, cfg, seed=cfg.seed)
    rows = [(f, e, n) for f, (e, n) in enumerate(zip(res.errors, res.nlpds))]
    for f, e, n in rows:
        print(f"fold={f} error={e:.4f} nlpd={n:.4f}")
    print(f"mean error={res.error:.4f} nlpd={res.nlpd:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "error", "nlpd"])
            w.writerows(rows)
            w.writerow(["mean", res.error, res.nlpd])
    return 0


def _ints(v: str) -> tuple:
    return tuple(int(t) for t in v.replace(",", " ").split())


def scenario_from(values: dict[str, str]) -> BenchScenario:
    sc = BenchScenario(model=model_config(values, ignore=_BENCH_KEYS + _HARNESS_KEYS))
    if "name" in values:
        sc.name = values["name"]
    if "kinds" in values:
        sc.kinds = tuple(t.strip() for t in values["kinds"].replace(",", " ").split())
    if "sizes" in values:
        sc.sizes = _ints(values["sizes"])
    if "seeds" in values:
        sc.seeds = _ints(values["seeds"])
    for key, conv in (("d", int), ("n_centers", int), ("box_side", float), ("n_test", int),
                      ("timing_repeats", int)):
        if key in values:
            setattr(sc, key, conv(values[key]))
    sc.optimize = _flag(values, "optimize", True)
    if "theta" in values:
        sc.theta = tuple(float(t) for t in values["theta"].replace(",", " ").split())
    return sc


def cmd_bench(args) -> int:
    values = read_config(args.scenario)
    for item in args.set or []:
        values.update(parse_config(item, "--set"))
    sc = scenario_from(values)
    reports = bench(sc, args.out)
    for r in reports:
        print(f"{r.kind:4s} n={r.n:6d} seed={r.seed} fill_K={r.fill_K:.4f} fill_L={r.fill_L:.4f} "
              f"ep={r.ep_time:.2f}s opt={r.opt_time:.2f}s error={r.error:.4f} nlpd={r.nlpd:.4f}")
    print(f"appended {len(reports)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csgpc", description="Sparse EP Gaussian process classification.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic cluster data set as CSV")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--d", type=int, default=2)
    s.add_argument("--centers", type=int, default=200)
    s.add_argument("--box", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def model_flags(sp):
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key")
        sp.add_argument("--kind", choices=["se", "pp0", "pp1", "pp2", "pp3"])
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="fit MAP hyperparameters and save a model file")
    t.add_argument("data")
    t.add_argument("--out", required=True)
    model_flags(t)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict class probabilities with a saved model")
    pr.add_argument("model")
    pr.add_argument("data")
    pr.add_argument("--out", required=True)
    pr.add_argument("--train", help="training CSV, if it moved since training")
    pr.set_defaults(func=cmd_predict)

    c = sub.add_parser("cv", help="k-fold cross-validated error and nlpd")
    c.add_argument("data")
    c.add_argument("--folds", type=int)
    c.add_argument("--out")
    model_flags(c)
    c.set_defaults(func=cmd_cv)

    b = sub.add_parser("bench", help="run a benchmark scenario and append results")
    b.add_argument("scenario", help="key=value scenario file")
    b.add_argument("--out", required=True, help="results CSV (appended)")
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
