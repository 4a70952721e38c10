"""Command-line interface: ``hteml <command> [--config FILE] [flags]``.

Commands are ``dml``, ``dml_iv``, ``forest``, ``generic``, ``simulate`` and
``rerun``. A JSON config file supplies any flag under its long name (dashes
become underscores); flags given on the command line override it.

Every run writes ``results.json`` (full precision, deterministic for a given
config), ``manifest.json`` (seed, config hash, versions, wall time) and
tables in each requested format. Exit codes: 0 success, 2 configuration or
data error, 3 estimation error. Errors print one line ``ERROR <code>: <text>``
to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .causal_forest import (ForestError, ForestParams, dr_scores, fit_causal_forest, forest_ate,
                            heterogeneity_test, predict_cate, save_forest, subgroup_ate,
                            tune_forest, variable_importance)
from .dataset import DGP_NAMES, DataError, generate_dgp, load_csv
from .dml import DmlConfig, DmlError, dml_plm, dml_pliv
from .generic_ml import GenericMLError, PropensityModel, run_generic_ml
from .learners import METHODS, LearnerError, LearnerSpec, RankDeficiencyError
from .report import ReportError, ReportTable, emit_gates_plot_data, write_tables

logger = logging.getLogger("hteml")

ENV_THREADS = "HTEML_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 2, 3
COMMANDS = ("dml", "dml_iv", "forest", "generic", "simulate")

_COMMON = dict(data=None, outcome=None, treatment=None, covariates=None, instrument=None,
               cluster=None, block=None, out=None, format=["text"], seed=0)
DEFAULTS = {
    "dml": dict(_COMMON, learner=["lasso"], learner_m=None, hyper={}, folds=2, splits=100,
                aggregation="median", level=0.95),
    "forest": dict(_COMMON, trees=2000, subsample=0.5, honesty=0.5, min_treated=5,
                   min_control=5, mtry=None, cluster_mode=False, propensity="forest",
                   subgroups=[], level=0.95, tune=False, save_model=None),
    "generic": dict(_COMMON, learners=["lasso", "forest"], hyper={}, splits=100, groups=5,
                    level=0.90, propensity="constant", characteristics=[]),
    "simulate": dict(out=None, format=["text"], seed=0, dgp="plm_nonlinear", reps=200, n=500,
                     p=20, params={}, method=None, learner="forest", hyper={}, folds=2,
                     splits=10, level=0.95, trees=500),
}
DEFAULTS["dml_iv"] = dict(DEFAULTS["dml"])
# settings that never change results; kept out of results.json and the config hash
_RUNTIME_KEYS = ("out", "format", "threads", "config")


class ConfigError(ValueError):
    pass


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int):
        super().__init__(message)
        self.code = code
        self.status = status


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _json_obj(text):
    try:
        val = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc}") from None
    if not isinstance(val, dict):
        raise argparse.ArgumentTypeError("expected a JSON object")
    return val


def _add_common(p, data=True):
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON config file; flags override it")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--format", type=_csv_list, default=S, help="text,csv,jsonl")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--threads", type=int, default=S,
                   help=f"worker threads (default ${ENV_THREADS} or 1)")
    if data:
        p.add_argument("--data", default=S, help="CSV file with a header row")
        p.add_argument("--outcome", type=_csv_list, default=S)
        p.add_argument("--treatment", type=_csv_list, default=S)
        p.add_argument("--covariates", type=_csv_list, default=S,
                       help="default: every column not used in another role")
        p.add_argument("--cluster", default=S)
        p.add_argument("--block", default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="hteml", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"hteml {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("dml", "dml_iv"):
        p = sub.add_parser(name, help="cross-fitted partially linear " +
                           ("IV model" if name == "dml_iv" else "model"))
        _add_common(p)
        if name == "dml_iv":
            p.add_argument("--instrument", type=_csv_list, default=S)
        p.add_argument("--learner", type=_csv_list, default=S, help=f"one or more of {METHODS}")
        p.add_argument("--learner-m", dest="learner_m", default=S,
                       help="treatment-equation learner (default: same as --learner)")
        p.add_argument("--hyper", type=_json_obj, default=S,
                       help='per-method hyperparameters, e.g. \'{"forest": {"n_trees": 200}}\'')
        p.add_argument("--folds", type=int, default=S)
        p.add_argument("--splits", type=int, default=S, help="cross-fitting repetitions")
        p.add_argument("--aggregation", choices=("median", "mean"), default=S)
        p.add_argument("--level", type=float, default=S)

    p = sub.add_parser("forest", help="honest causal forest")
    _add_common(p)
    p.add_argument("--trees", type=int, default=S)
    p.add_argument("--subsample", type=float, default=S)
    p.add_argument("--honesty", type=float, default=S)
    p.add_argument("--min-treated", dest="min_treated", type=int, default=S)
    p.add_argument("--min-control", dest="min_control", type=int, default=S)
    p.add_argument("--mtry", type=int, default=S)
    p.add_argument("--cluster-mode", dest="cluster_mode", action="store_true", default=S)
    p.add_argument("--propensity", default=S, help="forest, constant, block, or a number")
    p.add_argument("--subgroups", type=_csv_list, default=S,
                   help="covariates split at their median")
    p.add_argument("--level", type=float, default=S)
    p.add_argument("--tune", action="store_true", default=S)
    p.add_argument("--save-model", dest="save_model", default=S)

    p = sub.add_parser("generic", help="generic ML inference (BLP, GATES, CLAN)")
    _add_common(p)
    p.add_argument("--learners", type=_csv_list, default=S)
    p.add_argument("--hyper", type=_json_obj, default=S)
    p.add_argument("--splits", type=int, default=S)
    p.add_argument("--groups", type=int, default=S)
    p.add_argument("--level", type=float, default=S)
    p.add_argument("--propensity", choices=("constant", "by_block", "learned"), default=S)
    p.add_argument("--characteristics", type=_csv_list, default=S)

    p = sub.add_parser("simulate", help="Monte Carlo bias/coverage on a synthetic DGP")
    _add_common(p, data=False)
    p.add_argument("--dgp", choices=DGP_NAMES, default=S)
    p.add_argument("--reps", type=int, default=S)
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--p", type=int, default=S)
    p.add_argument("--params", type=_json_obj, default=S)
    p.add_argument("--method", choices=("dml", "dml_iv", "forest"), default=S)
    p.add_argument("--learner", default=S)
    p.add_argument("--hyper", type=_json_obj, default=S)
    p.add_argument("--folds", type=int, default=S)
    p.add_argument("--splits", type=int, default=S)
    p.add_argument("--level", type=float, default=S)
    p.add_argument("--trees", type=int, default=S)

    p = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=S)
    p.add_argument("--threads", type=int, default=S)
    return parser


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for one run. ``options`` holds every resolved setting."""

    command: str
    options: dict

    @property
    def outdir(self) -> Path:
        return Path(self.options["out"])

    @property
    def seed(self) -> int:
        return int(self.options["seed"])

    def core(self) -> dict:
        """Settings that determine results (no output paths or thread counts)."""
        return {"command": self.command,
                **{k: v for k, v in sorted(self.options.items()) if k not in _RUNTIME_KEYS}}

    def config_hash(self) -> str:
        return hashlib.sha256(_canonical(self.core()).encode()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"))


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def resolve_config(command: str, flags: dict) -> RunConfig:
    """Merge defaults, the optional config file and explicit flags; validate."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    opts = dict(DEFAULTS[command])
    cfg_path = flags.get("config")
    if cfg_path:
        path = Path(cfg_path)
        if not path.is_file():
            raise ConfigError(f"missing file: {path}")
        try:
            file_opts = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
        if not isinstance(file_opts, dict):
            raise ConfigError(f"config {path}: expected a JSON object")
        file_cmd = file_opts.pop("command", command)
        if file_cmd != command:
            raise ConfigError(f"config is for {file_cmd!r}, not {command!r}")
        unknown = set(file_opts) - set(opts) - {"threads"}
        if unknown:
            raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
        opts.update(file_opts)
    opts.update({k: v for k, v in flags.items() if k != "config"})
    opts["threads"] = int(opts.get("threads") or os.environ.get(ENV_THREADS, 1) or 1)
    if opts.get("out") is None:
        raise ConfigError("an output directory is required (--out)")
    for f in opts["format"]:
        if f not in ("text", "csv", "jsonl"):
            raise ConfigError(f"unknown output format {f!r}")
    list_keys = ["outcome", "treatment", "covariates", "instrument", "learners", "subgroups",
                 "characteristics", "format"] + (["learner"] if command != "simulate" else [])
    for key in list_keys:
        if isinstance(opts.get(key), str):
            opts[key] = _csv_list(opts[key])
    for key in ("data", "save_model"):
        if opts.get(key):
            opts[key] = str(Path(opts[key]).resolve())
    if command != "simulate":
        if not opts.get("data"):
            raise ConfigError("--data is required")
        if not Path(opts["data"]).is_file():
            raise ConfigError(f"missing file: {opts['data']}")
        if not opts.get("outcome") or not opts.get("treatment"):
            raise ConfigError("--outcome and --treatment are required")
    if command == "dml_iv" and not opts.get("instrument"):
        raise ConfigError("dml_iv needs --instrument")
    for key in ("learner", "learners"):
        if key == "learner" and command == "simulate":
            continue
        for m in opts.get(key) or []:
            if m not in METHODS:
                raise ConfigError(f"unknown learner {m!r}; choose from {METHODS}")
    if command == "simulate" and opts["learner"] not in METHODS:
        raise ConfigError(f"unknown learner {opts['learner']!r}")
    return RunConfig(command, opts)


# ---------------------------------------------------------------------------
# data and learners
# ---------------------------------------------------------------------------

def _header(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [h.strip() for h in fh.readline().rstrip("\r\n").split(",")]


def _load(cfg: RunConfig, outcome: str, treatment: str):
    o = cfg.options
    used = {outcome, treatment, *(o.get("instrument") or []), o.get("cluster"), o.get("block")}
    covs = o.get("covariates") or [c for c in _header(o["data"]) if c not in used]
    schema = {"y": outcome, "d": treatment, "x": covs}
    if o.get("instrument"):
        schema["instrument"] = o["instrument"]
    if o.get("cluster"):
        schema["cluster"] = o["cluster"]
    if o.get("block"):
        schema["block"] = o["block"]
    return load_csv(o["data"], schema)


def _spec(method: str, hyper: dict, seed: int) -> LearnerSpec:
    try:
        return LearnerSpec(method, dict(hyper.get(method, {})), seed=seed)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"learner {method!r}: {exc}") from None


def _pairs(cfg):
    return [(y, d) for y in cfg.options["outcome"] for d in cfg.options["treatment"]]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _run_dml(cfg: RunConfig):
    o = cfg.options
    iv = cfg.command == "dml_iv"
    learners = o["learner"]
    cells, rows, records = [], [], []
    for y, d in _pairs(cfg):
        data = _load(cfg, y, d)
        row = []
        for method in learners:
            spec_g = _spec(method, o["hyper"], cfg.seed)
            spec_m = _spec(o["learner_m"], o["hyper"], cfg.seed) if o["learner_m"] else spec_g
            try:
                conf = DmlConfig(spec_g, spec_m, k_folds=o["folds"], s_repetitions=o["splits"],
                                 aggregation=o["aggregation"], seed=cfg.seed, level=o["level"],
                                 n_jobs=o["threads"])
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            est = (dml_pliv if iv else dml_plm)(data, conf)
            row.append(est)
            records.append({"outcome": y, "treatment": d, "learner": method,
                            "n": data.n, "dropped_rows": data.dropped_rows,
                            "data_fingerprint": data.fingerprint(), "estimate": est.to_dict()})
        rows.append(f"{y} ~ {d}")
        cells.append(row)
    title = "DML-IV estimates" if iv else "DML estimates"
    notes = [f"K = {o['folds']} folds, S = {o['splits']} repetitions, {o['aggregation']} "
             "aggregation.", "Standard errors in parentheses."]
    return [ReportTable(title, rows, learners, cells, notes)], {"estimates": records}


def _forest_propensity(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return value


def _run_forest(cfg: RunConfig):
    o = cfg.options
    if len(o["outcome"]) != 1 or len(o["treatment"]) != 1:
        raise ConfigError("forest takes exactly one outcome and one treatment")
    data = _load(cfg, o["outcome"][0], o["treatment"][0])
    try:
        params = ForestParams(n_trees=o["trees"], subsample_fraction=o["subsample"],
                              honesty_fraction=o["honesty"], min_treated_per_leaf=o["min_treated"],
                              min_control_per_leaf=o["min_control"], mtry=o["mtry"],
                              cluster_mode=bool(o["cluster_mode"]), seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for c in o["subgroups"]:
        if c not in data.x_names:
            raise ConfigError(f"unknown column {c!r} (subgroups)")
    tuning = None
    if o["tune"]:
        tuned = tune_forest(data, params, seed=cfg.seed, n_jobs=o["threads"])
        params = tuned.best
        tuning = {"best": params.to_dict(), "losses": list(tuned.losses)}
    model = fit_causal_forest(data, params, n_jobs=o["threads"])
    pred = predict_cate(model, oob=True)
    scores = dr_scores(model, data, propensity=_forest_propensity(o["propensity"]))
    lvl = o["level"]
    ate = forest_ate(model, data, scores=scores, level=lvl)
    het = heterogeneity_test(model, data, propensity=_forest_propensity(o["propensity"]),
                             level=lvl)
    subs = {c: subgroup_ate(model, data, c, scores=scores, level=lvl) for c in o["subgroups"]}
    imp = variable_importance(model)
    if o["save_model"]:
        save_forest(model, o["save_model"])

    diff_se = float(np.hypot(het.ate_above.se, het.ate_below.se))
    lo, hi = het.diff_ci
    main = ReportTable(
        "Causal forest", ["ATE", "Above-median CATE", "Below-median CATE", "Difference",
                          f"{int(round(lvl * 100))}% CI for difference"],
        ["estimate"], [[ate], [het.ate_above], [het.ate_below], [(het.difference, diff_se)],
                       [f"({lo:.4g}, {hi:.4g})"]],
        [f"{model.n_trees} trees; doubly robust scores; standard errors in parentheses.",
         f"IJ variance clamp rate {pred.clamp_rate:.3f}."])
    tables = [main]
    if subs:
        tables.append(ReportTable(
            "Subgroup ATEs (median split)", list(subs), ["below", "above", "p-value"],
            [[s.below, s.above, s.p_diff] for s in subs.values()]))
    if imp:
        tables.append(ReportTable("Variable importance", [n for n, _ in imp], ["importance"],
                                  [[v] for _, v in imp]))
    results = {
        "n": data.n, "dropped_rows": data.dropped_rows, "data_fingerprint": data.fingerprint(),
        "params": params.to_dict(), "aborted_trees": model.aborted_trees, "tuning": tuning,
        "ate": ate.to_dict(),
        "heterogeneity": {"above": het.ate_above.to_dict(), "below": het.ate_below.to_dict(),
                          "difference": het.difference, "diff_ci": list(het.diff_ci),
                          "difference_se": diff_se, "median_cate": list(het.median_cate),
                          "degenerate_grouping": het.degenerate_grouping},
        "subgroups": {c: {"below": s.below.to_dict(), "above": s.above.to_dict(),
                          "p_diff": s.p_diff, "threshold": s.threshold} for c, s in subs.items()},
        "variable_importance": [[n, v] for n, v in imp],
        "cate_oob": {"tau": pred.tau, "variance": pred.variance, "clamp_rate": pred.clamp_rate},
    }
    return tables, results


def _run_generic(cfg: RunConfig):
    o = cfg.options
    if len(o["outcome"]) != 1 or len(o["treatment"]) != 1:
        raise ConfigError("generic takes exactly one outcome and one treatment")
    data = _load(cfg, o["outcome"][0], o["treatment"][0])
    for c in o["characteristics"]:
        if c not in data.column_names:
            raise ConfigError(f"unknown column {c!r} (characteristics)")
    specs = [_spec(m, o["hyper"], cfg.seed) for m in o["learners"]]
    prop = PropensityModel.build(data, o["propensity"])
    res = run_generic_ml(data, specs, prop, n_splits=o["splits"], level=o["level"],
                         seed=cfg.seed, k_groups=o["groups"],
                         characteristics=o["characteristics"], n_jobs=o["threads"])
    labels = [r.label for r in res]
    K = o["groups"]
    lvl = f"{int(round(o['level'] * 100))}%"
    foot = [f"Medians over {o['splits']} splits; {lvl} CIs; p-values {res[0].p_adjustment}.",
            "Standard errors in parentheses."]
    tables = [
        ReportTable("BLP", ["ATE (beta1)", "HET (beta2)"], labels,
                    [[r.beta1 for r in res], [r.beta2 for r in res]], foot),
        ReportTable("GATES", [f"G{k + 1}" for k in range(K)] + [f"G{K} - G1"], labels,
                    [[r.gammas[k] for r in res] for k in range(K)] + [[r.gates_diff for r in res]],
                    foot),
        ReportTable("Best linear predictor and GATES metrics", ["lambda_blp", "lambda_gates"],
                    labels, [[r.lambda_blp for r in res], [r.lambda_gates for r in res]]),
    ]
    if o["characteristics"]:
        rows, cells = [], []
        for c in o["characteristics"]:
            rows += [f"{c}: most affected", f"{c}: least affected", f"{c}: p-value"]
            cells += [[r.clan[c].mean_most for r in res], [r.clan[c].mean_least for r in res],
                      [r.clan[c].p_diff for r in res]]
        tables.append(ReportTable("CLAN", rows, labels, cells, foot))
    out = Path(o["out"])
    for r in res:
        if any(g is not None for g in r.gammas):
            emit_gates_plot_data(r, out / f"gates_plot_{r.label}.csv")
    return tables, {"n": data.n, "data_fingerprint": data.fingerprint(),
                    "propensity_mode": prop.mode, "results": [r.to_dict() for r in res]}


def _run_simulate(cfg: RunConfig):
    o = cfg.options
    dgp = o["dgp"]
    method = o["method"] or {"plm_nonlinear": "dml", "pliv_endogenous": "dml_iv"}.get(dgp, "forest")
    if method == "forest" and dgp not in ("hte_forest", "hte_null"):
        raise ConfigError("forest simulations need a binary-treatment DGP (hte_forest, hte_null)")
    if method != "forest" and dgp in ("hte_forest", "hte_null") and method == "dml_iv":
        raise ConfigError(f"{dgp} has no instrument")
    est, ses, cover, truth = [], [], [], []
    for r in range(o["reps"]):
        try:
            s = generate_dgp(dgp, o["n"], o["p"], o["params"], seed=cfg.seed + r)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if method == "forest":
            params = ForestParams(n_trees=o["trees"], seed=cfg.seed + r)
            model = fit_causal_forest(s.dataset, params)
            e = forest_ate(model, s.dataset, level=o["level"])
        else:
            spec = _spec(o["learner"], o["hyper"], cfg.seed + r)
            conf = DmlConfig(spec, spec, k_folds=o["folds"], s_repetitions=o["splits"],
                             seed=cfg.seed + r, level=o["level"])
            e = (dml_pliv if method == "dml_iv" else dml_plm)(s.dataset, conf)
        est.append(e.theta)
        ses.append(e.se)
        truth.append(s.true_ate)
        cover.append(e.ci_low <= s.true_ate <= e.ci_high)
    est, ses, truth = map(np.asarray, (est, ses, truth))
    err = est - truth
    summary = {
        "true_value": float(truth.mean()), "mean_estimate": float(est.mean()),
        "bias": float(err.mean()), "mc_se": float(err.std(ddof=1) / np.sqrt(len(err)))
        if len(err) > 1 else float("nan"),
        "sd": float(est.std(ddof=1)) if len(est) > 1 else float("nan"),
        "rmse": float(np.sqrt(np.mean(err**2))), "mean_se": float(ses.mean()),
        "coverage": float(np.mean(cover)),
    }
    label = f"{method}[{o['learner'] if method != 'forest' else 'causal_forest'}]"
    table = ReportTable(f"Simulation: {dgp}, n = {o['n']}, p = {o['p']}, {o['reps']} reps",
                        list(summary), [label], [[v] for v in summary.values()],
                        [f"Coverage of nominal {o['level']:.0%} intervals."])
    return [table], {"method": method, "summary": summary, "estimates": est, "se": ses,
                     "truth": truth}


_RUNNERS = {"dml": _run_dml, "dml_iv": _run_dml, "forest": _run_forest,
            "generic": _run_generic, "simulate": _run_simulate}


def _versions() -> dict:
    import numba
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "hteml": __version__}


def run(cfg: RunConfig) -> dict:
    """Execute a validated run and write its artifacts; returns the results document."""
    out = cfg.outdir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    t0 = time.perf_counter()
    tables, results = _RUNNERS[cfg.command](cfg)
    wall = time.perf_counter() - t0
    doc = _clean({"command": cfg.command, "config": cfg.core(), "results": results})
    text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    (out / "results.json").write_text(text, encoding="utf-8")
    write_tables(tables, out, cfg.options["format"])
    manifest = {
        "command": cfg.command, "seed": cfg.seed, "config": _clean(cfg.options),
        "config_hash": cfg.config_hash(), "versions": _versions(), "wall_time_s": wall,
        "results_sha256": hashlib.sha256(text.encode()).hexdigest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")
    return doc


def config_from_manifest(path, overrides: dict) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing file: {path}")
    try:
        m = json.loads(path.read_text(encoding="utf-8"))
        command, options = m["command"], dict(m["config"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: not a run manifest ({exc})") from None
    options.update(overrides)
    return resolve_config(command, options)


_ESTIMATION_ERRORS = (DmlError, ForestError, GenericMLError, LearnerError, RankDeficiencyError,
                      np.linalg.LinAlgError, ReportError)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        try:
            if args.command == "rerun":
                manifest = flags.pop("manifest")
                cfg = config_from_manifest(manifest, flags)
            else:
                cfg = resolve_config(args.command, flags)
        except (ConfigError, DataError) as exc:
            raise CliError("config", str(exc), EXIT_CONFIG) from exc
        try:
            run(cfg)
        except (ConfigError, DataError) as exc:
            raise CliError("config", str(exc), EXIT_CONFIG) from exc
        except _ESTIMATION_ERRORS as exc:
            raise CliError(f"estimation[{cfg.command}]", str(exc), EXIT_ESTIMATION) from exc
        except ValueError as exc:
            raise CliError(f"estimation[{cfg.command}]", str(exc), EXIT_ESTIMATION) from exc
    except CliError as exc:
        msg = " ".join(str(exc).split())
        print(f"ERROR {exc.code}: {msg}", file=sys.stderr)
        return exc.status
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
