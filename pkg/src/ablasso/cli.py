"""Command line interface: ``estimate``, ``simulate`` and ``montecarlo``.

Every command takes an optional JSON config (``--config``); flags override
config values. Failures print a one-line JSON error object on stdout and
exit with 2 (bad input or configuration) or 3 (numerical failure).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from importlib import resources

import jsonschema
import numpy as np

from . import __version__
from .errors import (
    ABLassoError,
    BadParameter,
    ConvergenceError,
    FirstStageError,
    Infeasible,
    InternalError,
    PanelError,
    ShapeError,
    SingularDesign,
    UnitRootError,
)
from .estimator import CrossFitPlan, EstimatorConfig, FirstStageConfig, ab_lasso, ab_lasso_ss, long_run_effects
from .gmm import GmmConfig, ab_gmm_two_step, dab_ss
from .highdim import GeneralConfig, general_estimate
from .panel import InstrumentMode, add_outcome_lags, read_panel_csv
from .simulate import DgpConfig, EstimatorSpec, monte_carlo, simulate_levels

SCHEMA_VERSION = "1.0"
THREADS_ENV = "ABLASSO_THREADS"

DEFAULT_ESTIMATORS = (
    {"method": "ab-gmm", "label": "AB"},
    {"method": "ab-lasso", "label": "AB-LASSO"},
    {"method": "ab-lasso-ss", "K": 2, "label": "AB-LASSO-SS(K=2)"},
    {"method": "ab-lasso-ss", "K": 5, "label": "AB-LASSO-SS(K=5)"},
    {"method": "dab-ss", "label": "DAB-SS"},
)


class ConfigError(ABLassoError):
    """Unusable command line or configuration."""

    def __init__(self, msg, column=None):
        super().__init__(msg)
        self.column = column


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _schema() -> dict:
    text = resources.files("ablasso").joinpath("schema/config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from None


def _merge(cfg: dict, args) -> dict:
    """Apply command-line overrides on top of the config file."""
    out = json.loads(json.dumps(cfg))
    simple = {"input": args.input, "out": getattr(args, "out", None), "seed": args.seed,
              "reps": getattr(args, "reps", None), "threads": getattr(args, "threads", None),
              "N": getattr(args, "N", None), "T": getattr(args, "T", None),
              "method": getattr(args, "method", None), "outcome_lags": getattr(args, "outcome_lags", None),
              "reps_out": getattr(args, "reps_out", None)}
    for k, v in simple.items():
        if v is not None:
            out[k] = v
    cf = out.setdefault("cross_fit", {})
    if args.k_folds is not None:
        cf["K"] = args.k_folds
    if args.n_splits is not None:
        cf["n_splits"] = args.n_splits
    if args.seed is not None:
        cf["seed"] = args.seed
    for effect in getattr(args, "long_run", None) or []:
        out.setdefault("long_run", []).append({"effect": effect})
    validate_config(out)
    return out


# ------------------------------------------------------------------- JSON out


def _clean(obj, path, nulls):
    """Replace non-finite floats by null and record why."""
    if isinstance(obj, dict):
        return {k: _clean(v, f"{path}.{k}" if path else str(k), nulls) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v, f"{path}[{i}]", nulls) for i, v in enumerate(obj)]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not math.isfinite(v):
            nulls.append({"field": path, "reason": f"non-finite value ({v})"})
            return None
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist(), path, nulls)
    if obj is None and path.endswith(("estimate", "std_error", "ci_lower", "ci_upper")):
        nulls.append({"field": path, "reason": "non-finite value"})
    return obj


def _dump(payload: dict) -> str:
    nulls: list = []
    body = _clean(payload, "", nulls)
    body["null_fields"] = nulls
    return json.dumps(body, indent=2, sort_keys=True, allow_nan=False)


def _write(path: str | None, text: str):
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")
    os.replace(tmp, path)


def _table(result) -> str:
    lines = [f"{result.method}  ({int(round(100 * result.confidence_level))}% intervals)",
             f"{'coefficient':<16}{'estimate':>12}{'std.err':>12}{'lower':>12}{'upper':>12}"]
    for j, name in enumerate(result.names):
        lines.append(f"{name:<16}{result.theta[j]:>12.5f}{result.std_errors[j]:>12.5f}"
                     f"{result.ci_lower[j]:>12.5f}{result.ci_upper[j]:>12.5f}")
    for e in result.long_run:
        lines.append(f"long-run {e.label:<7}{e.estimate:>12.5f}{e.std_error:>12.5f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def build_panel(cfg: dict):
    if "input" not in cfg:
        raise ConfigError("--input is required")
    try:
        panel = read_panel_csv(cfg["input"], cfg.get("regressors"), cfg.get("outcome", "y"))
    except KeyError as exc:
        raise ConfigError(f"missing column {exc.args[0]!r}", column=exc.args[0]) from None
    except OSError as exc:
        raise ConfigError(f"cannot read {cfg['input']}: {exc.strerror}") from None
    names = panel.regressor_names
    for key in ("self", "strictly_exogenous"):
        unknown = [n for n in cfg.get(key, []) if n not in names]
        if unknown:
            raise ConfigError(f"{key} names unknown regressors {unknown}")
    modes = tuple(InstrumentMode.SELF if n in cfg.get("self", []) else InstrumentMode.PROJECT for n in names)
    exo = tuple(n in cfg.get("strictly_exogenous", []) for n in names)
    panel = panel.replace(instrument_modes=modes, strictly_exogenous=exo)
    p = int(cfg.get("outcome_lags", 0))
    if p:
        labels = panel.time_labels
        panel = add_outcome_lags(panel, p)
        if "outcome_first_observed" in cfg:
            label = cfg["outcome_first_observed"]
            matches = [q for q, lab in enumerate(labels) if str(lab) == str(label)]
            if not matches:
                raise ConfigError(f"outcome_first_observed {label!r} is not a time id of the data")
            first = matches[0] - p + 1
            panel = panel.replace(first_observed_period=tuple(
                first if k is not None else None for k in panel.outcome_lags))
    return panel


def run_estimate(cfg: dict):
    panel = build_panel(cfg)
    method = cfg.get("method", "ab-lasso-ss")
    level = cfg.get("confidence_level", 0.95)
    fs = FirstStageConfig(**cfg.get("first_stage", {}))
    cf = dict(cfg.get("cross_fit", {}))
    variance = cf.pop("variance", "cross_fit")
    plan = CrossFitPlan(**{k: v for k, v in cf.items()})
    if method == "ab-lasso":
        res = ab_lasso(panel, EstimatorConfig(first_stage=fs, confidence_level=level))
    elif method == "ab-lasso-ss":
        res = ab_lasso_ss(panel, plan, EstimatorConfig(first_stage=fs, confidence_level=level, variance=variance))
    elif method in ("ab-gmm", "dab-ss"):
        gc = GmmConfig(confidence_level=level, **cfg.get("gmm", {}))
        res = ab_gmm_two_step(panel, gc) if method == "ab-gmm" else dab_ss(panel, plan.seed, gc)
    else:
        if "low_dim" not in cfg:
            raise ConfigError("method 'general' needs low_dim")
        g = dict(cfg.get("general", {}))
        use_plan = g.pop("cross_fit", False)
        gcfg = GeneralConfig(first_stage=fs, confidence_level=level, **g)
        res = general_estimate(panel, cfg["low_dim"], gcfg, plan if use_plan else None)

    effects = []
    for req in cfg.get("long_run", []):
        if req["effect"] not in res.names:
            raise ConfigError(f"long-run effect {req['effect']!r} is not an estimated coefficient")
        lags = req.get("lags")
        if lags is None:
            lags = [n for n, k in zip(panel.regressor_names, panel.outcome_lags) if k is not None]
        missing = [n for n in lags if n not in res.names]
        if missing:
            raise ConfigError(f"long-run lags {missing} are not estimated coefficients")
        effects += long_run_effects(res, [res.names.index(req["effect"])], [res.names.index(n) for n in lags],
                                    labels=[req.get("label", req["effect"])])
    res = res.with_long_run(effects)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": "estimate",
        "version": __version__,
        "input": cfg.get("input"),
        "panel": {"N": panel.n_units, "T": panel.n_periods, "regressors": list(panel.regressor_names)},
        "config": cfg,
        "result": res.to_dict(),
    }
    return payload, _table(res)


def simulate_csv(cfg: dict) -> str:
    """Long-format CSV of a simulated panel.

    Periods 0..T are written; period 0 carries ``Y_0`` (from the burn-in) and
    ``D_0``, so ``outcome_lags=1`` with ``outcome_first_observed=1`` rebuilds
    exactly the panel returned by :func:`simulate_dgp`.
    """
    N, T = cfg.get("N", 200), cfg.get("T", 30)
    dgp = DgpConfig(seed=cfg.get("seed", 0), **cfg.get("dgp", {}))
    y, d = simulate_levels(dgp, N, T)
    out = [",".join(["unit", "time", "y", "d"])]
    for i in range(N):
        for s in range(T + 1):
            out.append(f"{i + 1},{s},{float(y[i, s])!r},{float(d[i, s])!r}")
    return "\n".join(out) + "\n"


def run_montecarlo(cfg: dict):
    dgp = DgpConfig(**cfg.get("dgp", {}))
    specs_cfg = cfg.get("estimators") or [dict(e) for e in DEFAULT_ESTIMATORS]
    cf = cfg.get("cross_fit", {})
    specs = []
    for e in specs_cfg:
        e = dict(e)
        if e["method"].endswith("-ss") and e["method"] != "dab-ss":
            if "K" in cf:
                e["K"] = cf["K"]
            if "n_splits" in cf:
                e["n_splits"] = cf["n_splits"]
        specs.append(EstimatorSpec(**e))
    threads = cfg.get("threads") or int(os.environ.get(THREADS_ENV, "1") or 1)
    summary = monte_carlo(dgp, cfg.get("N", 200), cfg.get("T", 30), specs, cfg.get("reps", 100),
                          master_seed=cfg.get("seed", 0), workers=threads)
    return summary


# -------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ablasso", description="Arellano-Bond LASSO estimation and simulation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (flags override it)")
        sp.add_argument("--input", help="long-format panel CSV")
        sp.add_argument("--out", help="output file (default: stdout)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--k-folds", type=int, dest="k_folds")
        sp.add_argument("--n-splits", type=int, dest="n_splits")

    e = sub.add_parser("estimate", help="estimate a model on a panel CSV")
    common(e)
    e.add_argument("--method", choices=["ab-lasso", "ab-lasso-ss", "ab-gmm", "dab-ss", "general"])
    e.add_argument("--outcome-lags", type=int, dest="outcome_lags")
    e.add_argument("--long-run", action="append", dest="long_run", metavar="EFFECT",
                   help="report the long-run effect of EFFECT over all outcome lags (repeatable)")
    e.add_argument("--table", help="also write the human-readable table here (default: stderr)")

    s = sub.add_parser("simulate", help="write a simulated panel CSV")
    common(s)
    s.add_argument("--N", type=int)
    s.add_argument("--T", type=int)

    m = sub.add_parser("montecarlo", help="Monte Carlo summary table")
    common(m)
    m.add_argument("--N", type=int)
    m.add_argument("--T", type=int)
    m.add_argument("--reps", type=int)
    m.add_argument("--threads", type=int, help=f"worker processes (default: ${THREADS_ENV} or 1)")
    m.add_argument("--reps-out", dest="reps_out", help="per-replication audit CSV")
    m.add_argument("--json-out", dest="json_out", help="summary JSON (default: next to --out)")
    return p


_NUMERIC = (SingularDesign, ConvergenceError, FirstStageError, UnitRootError, Infeasible, InternalError,
            ArithmeticError, np.linalg.LinAlgError)


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        if args.command is None:
            raise ConfigError("a command is required: estimate, simulate or montecarlo")
        cfg = _merge(load_config(args.config), args)
        if args.command == "estimate":
            payload, table = run_estimate(cfg)
            _write(cfg.get("out"), _dump(payload))
            if args.table:
                _write(args.table, table)
            else:
                sys.stderr.write(table)
        elif args.command == "simulate":
            _write(cfg.get("out"), simulate_csv(cfg))
        else:
            summary = run_montecarlo(cfg)
            out = cfg.get("out")
            _write(out, summary.to_csv())
            json_out = args.json_out or (os.path.splitext(out)[0] + ".json" if out not in (None, "-") else None)
            if json_out:
                _write(json_out, _dump({"schema_version": SCHEMA_VERSION, "command": "montecarlo",
                                        "version": __version__, **summary.to_dict()}))
            if cfg.get("reps_out"):
                _write(cfg["reps_out"], summary.reps_csv())
        return 0
    except (ConfigError, BadParameter, PanelError, ShapeError, KeyError, OSError) as exc:
        return _fail(exc, 2)
    except _NUMERIC as exc:
        return _fail(exc, 3)


def _fail(exc, code: int) -> int:
    payload = {"schema_version": SCHEMA_VERSION, "status": "error", "exit_code": code,
               "error": type(exc).__name__, "message": str(exc.args[0]) if exc.args else str(exc)}
    for attr in ("column", "period", "regressor"):
        v = getattr(exc, attr, None)
        if v is not None:
            payload[attr] = v
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
