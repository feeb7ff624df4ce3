"""Command-line interface.

Subcommands: ``simulate``, ``fit``, ``predict``, ``cv``, ``importance`` and
``report``. ``--config FILE`` reads flat ``key = value`` lines whose keys
are option names (dashes or underscores); options given on the command line
take precedence. On failure a JSON error object is written to stderr and the
exit status is 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

from .core import read_dataset_csv, write_dataset_csv
from .exceptions import ConfigurationError, SchemaError, SpatvimError

logger = logging.getLogger("spatvim")

# options that the config file may not set
_RESERVED = {"command", "config", "func", "help"}


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None


def read_config(path):
    """Parse a flat ``key = value`` file (``#`` starts a comment)."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def load_model(path):
    """Load a UK-PLS or spatial RF model file."""
    d = _read_json(path)
    kind = d.get("model")
    if kind == "ukpls":
        from .ukpls import UkPlsModel

        return UkPlsModel.from_dict(d)
    if kind == "spatrf":
        from .spatrf import SpatRfModel

        return SpatRfModel.from_dict(d)
    raise SchemaError(f"{path}: unknown model kind {kind!r}")


def _fixed(args):
    fixed = {}
    for name in ("nugget", "psill", "range"):
        v = getattr(args, f"fix_{name}", None)
        if v is not None:
            fixed[name] = v
    return fixed or None


def _forest_hyper(args):
    from .spatrf import SpatRfHyper

    fixed = _fixed(args) or {}
    return SpatRfHyper(mtry=args.mtry, min_leaf=args.min_leaf, max_depth=args.max_depth,
                       rounds=args.rounds, fixed=fixed)


def _model_spec(args, kind):
    from .evaluation import ModelSpec

    if kind == "ukpls":
        opts = {"l": args.l, "l_max": args.l_max, "fixed": _fixed(args)}
        return ModelSpec("ukpls", link=args.link, options=opts)
    h = _forest_hyper(args)
    opts = {"mtry": h.mtry, "min_leaf": h.min_leaf, "max_depth": h.max_depth, "rounds": h.rounds,
            "fixed": h.fixed}
    if kind == "rf":
        opts.pop("rounds")
    return ModelSpec(kind, K=args.K, link=args.link, options=opts)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_simulate(args):
    from .synthetic import (SyntheticSpec, calibrate_domain, calibrate_mean_scale,
                            max_abs_corr_with_active, simulate, variance_decomposition)

    spec = SyntheticSpec(n=args.n, p=args.p, decoys=args.decoys, block_corr=args.block_corr,
                         domain=args.domain, seed=args.seed)
    if spec.domain is None:
        spec = replace(spec, domain=calibrate_domain(spec))
    spec = calibrate_mean_scale(spec, n_mc=args.n_mc)
    data, comps = simulate(spec)
    write_dataset_csv(args.out, data)
    names, active = spec.layout()
    sidecar = {
        "format_version": 1,
        "spec": spec.to_dict(),
        "active": active,
        "true_coefficients": {k: v * spec.mean_scale for k, v in spec.coefficients},
        "variance_decomposition": variance_decomposition(comps),
        "max_abs_corr_with_active": dict(zip(names, max_abs_corr_with_active(data.X, spec).tolist())),
    }
    _write_json(args.sidecar or os.path.splitext(args.out)[0] + ".json", sidecar)
    return {"dataset": args.out, "n": data.n, "p": data.p}


def _read_training(args):
    return read_dataset_csv(args.data, transform=args.transform, metric=args.metric)


def cmd_fit(args):
    data = _read_training(args)
    if args.model == "ukpls":
        from .ukpls import fit_ukpls

        model = fit_ukpls(data, args.l, link=args.link, l_max=args.l_max, seed=args.seed,
                          fixed=_fixed(args))
    else:
        from .spatrf import fit_spatrf

        model = fit_spatrf(data, K=args.K, hyper=_forest_hyper(args), seed=args.seed,
                           link=args.link, workers=args.workers)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, separators=(",", ":"))
        fh.write("\n")
    return {"model": args.out, "kind": args.model}


def cmd_predict(args):
    model = load_model(args.model)
    X, _, sites, names = read_dataset_csv(args.data, metric=model.train_sites.metric,
                                          require_outcome=False)
    if model.names and tuple(names) != tuple(model.names):
        raise SchemaError("covariate columns do not match the model's")
    pred = model.predict(X, sites)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "prediction"])
        for sid, v in zip(sites.ids, pred):
            w.writerow([int(sid), _fmt(v)])
    return {"predictions": args.out, "n": int(len(pred))}


def cmd_cv(args):
    from .evaluation import kfold_cv

    data = _read_training(args)
    res = kfold_cv(_model_spec(args, args.model), data, k=args.folds, seed=args.seed,
                   workers=args.workers)
    prefix = args.out
    _write_json(prefix + ".json", {"format_version": 1, "model": args.model, "folds": args.folds,
                                   "seed": args.seed, **res.to_dict()})
    with open(prefix + ".csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "fold", "y", "y_hat", "error"])
        for sid, f, y, yh, e in zip(res.site_ids, res.folds, res.y, res.y_hat, res.errors):
            w.writerow([int(sid), int(f), _fmt(y), _fmt(yh), _fmt(e)])
    return {"r2": res.r2}


def cmd_importance(args):
    from .varimp import QuantileGrid, compute_importance

    model = load_model(args.model)
    data = read_dataset_csv(args.data, transform=model.transform, metric=model.train_sites.metric)
    policy = {"full": "full_refit", "weights": "weights_only", None: None}[args.policy]
    traj = compute_importance(model, data, QuantileGrid.parse(args.quantiles), policy=policy,
                              workers=args.workers)
    prefix = args.out
    with open(prefix + ".csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["covariate", "q_level", "quantile_value", "mu_bar"])
        for nm, q, qv, mu in traj.rows():
            w.writerow([nm, repr(q), _fmt(qv), _fmt(mu)])
    report = {"format_version": 1, "policy": traj.policy, "levels": list(traj.levels),
              "warnings": [{"component": k, "covariate": data.names[j], "level": l, "site": i,
                            "message": msg} for k, j, l, i, msg in traj.warnings]}
    if len(traj.levels) == 3:
        report.update(traj.contrasts().to_dict())
    _write_json(prefix + ".json", report)
    return {"trajectory": prefix + ".csv", "report": prefix + ".json"}


def cmd_report(args):
    lines = []
    for path in args.inputs:
        d = _read_json(path)
        if "r2" in d:
            lines.append(f"{path}: cross-validation ({d.get('model', '?')}, {d.get('folds', '?')} folds)")
            lines.append(f"  R2 = {d['r2']:.4f}")
            lines.append("  per fold: " + ", ".join(f"{v:.3f}" for v in d["per_fold_r2"]))
        elif "contrasts" in d:
            lines.append(f"{path}: importance (policy {d['policy']})")
            by_name = {c["covariate"]: c for c in d["contrasts"]}
            for rank, nm in enumerate(d["ranking"][: args.top], 1):
                c = by_name[nm]
                lines.append(f"  {rank:3d}. {nm:<24s} d31={c['d31']:+.5g}  d21={c['d21']:+.5g}  "
                             f"d32={c['d32']:+.5g}")
            if d.get("warnings"):
                lines.append(f"  {len(d['warnings'])} per-site re-fit fallbacks")
        elif d.get("model") in ("ukpls", "spatrf"):
            lines.append(f"{path}: {d['model']} model, {len(d['names'])} covariates, "
                         f"transform {d['transform']}, link {d['link']}")
            if d["model"] == "ukpls":
                lines.append(f"  components l = {d['projection']['l']}; theta = {d['theta']}")
            else:
                lines.append(f"  trees K = {d['K']}; hyper = {d['hyper']}")
        elif "variance_decomposition" in d:
            vd = d["variance_decomposition"]
            lines.append(f"{path}: simulated data (n={d['spec']['n']}, p={d['spec']['p']})")
            lines.append("  component variances: " + ", ".join(f"{k}={v:.3f}" for k, v in vd.items()))
        else:
            raise SchemaError(f"{path}: unrecognised result file")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return None


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_data(p, outcome_transform=True):
    p.add_argument("--data", required=True, help="dataset CSV (site_id,x,y,outcome,...)")
    p.add_argument("--metric", default="euclidean", choices=["euclidean", "haversine-km"])
    if outcome_transform:
        p.add_argument("--transform", default="identity", choices=["identity", "log", "sqrt"])


def _add_model_options(p):
    p.add_argument("--link", default="identity", choices=["identity", "log"])
    p.add_argument("--l", type=int, default=None, help="PLS components (default: chosen by CV)")
    p.add_argument("--l-max", type=int, default=None)
    p.add_argument("--K", type=int, default=200, help="number of trees")
    p.add_argument("--mtry", type=int, default=None)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--max-depth", type=int, default=12)
    p.add_argument("--rounds", type=int, default=2)
    for name in ("nugget", "psill", "range"):
        p.add_argument(f"--fix-{name}", type=float, default=None,
                       help=f"hold the covariance {name} at this value")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    common.add_argument("--config", default=None, help="flat key = value file")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="spatvim", parents=[common],
                                     description="Spatial prediction models and "
                                                 "leave-one-out variable importance.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sidecar", default=None, help="JSON path (default: OUT with .json)")
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--p", type=int, default=30)
    p.add_argument("--decoys", type=int, default=3)
    p.add_argument("--block-corr", type=float, default=0.8)
    p.add_argument("--domain", type=float, default=None)
    p.add_argument("--n-mc", type=int, default=100_000)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit a model and write its JSON file")
    p.add_argument("--model", required=True, choices=["ukpls", "spatrf"])
    _add_data(p)
    _add_model_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="predict at new sites")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--data", required=True, help="CSV; the outcome column may be empty")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cv", parents=[common], help="k-fold cross-validation")
    p.add_argument("--model", required=True, choices=["ukpls", "spatrf", "rf"])
    _add_data(p)
    _add_model_options(p)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--out", required=True, help="output prefix (.json and .csv)")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("importance", parents=[common], help="leave-one-out variable importance")
    p.add_argument("--model", required=True, help="model JSON fitted on --data")
    p.add_argument("--data", required=True)
    p.add_argument("--quantiles", default="0.25,0.5,0.75")
    p.add_argument("--policy", default=None, choices=["full", "weights"],
                   help="default: full for n <= 300, weights otherwise")
    p.add_argument("--out", required=True, help="output prefix (.csv and .json)")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("report", parents=[common], help="summarize result files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def _subparser(parser, name):
    """The subcommand parser called ``name``, or the name-to-parser map when ``name`` is None."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices if name is None else action.choices[name]
    raise KeyError(name)


def parse_args(argv=None):
    """Parse the command line; ``--config`` values become defaults the flags override.

    The config file is read before the full parse so that it can supply
    options the parser would otherwise reject as missing.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    early, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in _subparser(parser, None)), None)
    if early.config and command:
        conf = read_config(early.config)
        sp = _subparser(parser, command)
        known = {a.dest: a for a in sp._actions if a.dest not in _RESERVED}
        unknown = sorted(set(conf) - set(known))
        if unknown:
            raise ConfigurationError(f"{early.config}: unknown keys {unknown}")
        defaults = {}
        for key, value in conf.items():
            act = known[key]
            if act.nargs == 0:
                raise ConfigurationError(f"{early.config}: {key} cannot be set from a config file")
            defaults[key] = value
            act.required = False
        sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    try:
        args = parse_args(argv)
    except SpatvimError as exc:
        _fail(exc)
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        _fail(ConfigurationError("--workers must be at least 1"))
        return 1
    try:
        result = args.func(args)
    except (SpatvimError, ValueError, ArithmeticError, OSError, KeyError) as exc:
        _fail(exc)
        return 1
    if result is not None:
        sys.stdout.write(json.dumps({"status": "ok", **result}) + "\n")
    return 0


def _fail(exc):
    sys.stderr.write(json.dumps({"status": "error", "error": type(exc).__name__,
                                 "message": str(exc)}) + "\n")
