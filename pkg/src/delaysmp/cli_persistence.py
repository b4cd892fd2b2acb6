"""Experiment configuration, orchestration and reproducible on-disk reports.

Usage: ``delaysmp <experiment> [--config PATH] [--out DIR] [--seed N] [--paths N] [--quiet]``
or ``delaysmp validate-config --config PATH``.
"""
import argparse
import csv
import datetime as _dt
import json
import os
import shutil
import sys
import tempfile

import numpy as np

from . import experiments as X
from .backward_solvers import RegressionBasis
from .errors import ConfigInvalid, DelaySmpError
from .models import BUILTINS, affine_quadratic_model, get_model

SCHEMA_VERSION = 1
EXIT = {"pass": 0, "fail": 2, "inconclusive": 3, "error": 1}

EXPERIMENTS = {
    "forward-convergence": "criteria 1-3: Euler strong rate, method of steps, Picard splice",
    "bsde-oracle": "criterion 4: closed-form BSDE references",
    "adjoint-quadrature": "criteria 8 and 12: dense-quadrature references and degenerate cases",
    "spike-rates": "criteria 5-7: variational state, perturbed backward and Gamma rates",
    "duality-residual": "criteria 9 and 10: expansion remainder and duality bracket",
    "mp-scan": "criterion 11: maximum-principle scans at optimal and shifted controls",
    "full-suite": "criteria 1-12",
}

SECTIONS = {
    "experiment": str, "model": dict, "grid": dict, "mc": dict, "ladder": dict,
    "regression": dict, "tolerances": dict,
}
FIELDS = {
    "model": {"name": str, "params": dict, "inline": dict},
    "grid": {"T": (int, float), "delta": (int, float), "m_delay": int, "refinements": int},
    "mc": {"n_paths": int, "seed": int},
    "ladder": {"eps0": (int, float), "levels": int},
    "regression": {"degree": int, "ridge": (int, float)},
    "tolerances": {"picard": (int, float), "quadrature_rel": (int, float)},
}
INLINE_KEYS = {"n", "d", "k", "kappa", "Ab", "Bu", "Bmu", "b0", "Sx", "Su", "Smu", "s0", "Sxu", "fy", "Q", "q",
               "R", "r", "Rmu", "rmu", "G", "g", "xi", "gamma", "U"}


# ------------------------------------------------------------------ config

def _line_of(text, key):
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def parse_config(text):
    """Parse and validate a JSON config; ConfigInvalid carries the field and line."""
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"invalid JSON: {exc.msg}", field=None, line=exc.lineno) from None
    if not isinstance(cfg, dict):
        raise ConfigInvalid("top level must be an object", field=None, line=1)

    def bad(msg, fld, key=None):
        raise ConfigInvalid(msg, field=fld, line=_line_of(text, key or fld.split(".")[-1]))

    for key, val in cfg.items():
        if key not in SECTIONS:
            bad(f"unknown section {key!r}", key)
        if not isinstance(val, SECTIONS[key]):
            bad(f"section {key!r} must be {SECTIONS[key].__name__}", key)
        if key == "experiment":
            if val not in EXPERIMENTS:
                bad(f"experiment must be one of {sorted(EXPERIMENTS)}", key)
            continue
        for sub, v in val.items():
            fld = f"{key}.{sub}"
            if sub not in FIELDS[key]:
                bad(f"unknown field {fld}", fld)
            typ = FIELDS[key][sub]
            if isinstance(v, bool) or not isinstance(v, typ):
                bad(f"{fld} has the wrong type", fld)
            if isinstance(v, (int, float)) and sub not in ("seed", "ridge") and v <= 0:
                bad(f"{fld} must be positive", fld)
            if sub == "ridge" and v < 0:
                bad(f"{fld} must be non-negative", fld)
    model = cfg.get("model", {})
    if "name" in model and "inline" in model:
        bad("give either model.name or model.inline, not both", "model.inline")
    if "name" in model and model["name"] not in BUILTINS:
        bad(f"model.name must be one of {sorted(BUILTINS)}", "model.name")
    for k in model.get("inline", {}):
        if k not in INLINE_KEYS:
            bad(f"model.inline.{k} is not an affine coefficient", f"model.inline.{k}", k)
    grid = cfg.get("grid", {})
    if "T" in grid and "delta" in grid and not grid["delta"] < grid["T"]:
        bad("grid.delta must be smaller than grid.T", "grid.delta")
    try:
        _build_model(cfg)
    except ConfigInvalid:
        raise
    except Exception as exc:
        bad(f"model could not be built: {exc}", "model")
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def _build_model(cfg):
    m = cfg.get("model")
    if not m:
        return None
    grid = cfg.get("grid", {})
    over = {k: grid[k] for k in ("T", "delta") if k in grid}
    if "inline" in m:
        coeffs = {k: (np.asarray(v, float) if isinstance(v, list) else v) for k, v in m["inline"].items()}
        if "U" in coeffs:
            coeffs["U"] = tuple(np.asarray(coeffs["U"], float).tolist())
        return affine_quadratic_model("inline", **over, **coeffs)
    return get_model(m["name"], **{**m.get("params", {}), **over})


# ------------------------------------------------------------------ orchestration

def _opts(cfg, default_paths, default_seed, single=True):
    """(n_paths, seed) for one runner. The full suite keeps the acceptance path
    counts and treats mc.seed as an offset to every default seed."""
    mc = cfg.get("mc", {})
    if not single:
        return default_paths, default_seed + int(mc.get("seed", 0))
    return int(mc.get("n_paths", default_paths)), int(mc.get("seed", default_seed))


def _basis(cfg):
    r = cfg.get("regression")
    if not r:
        return None
    return RegressionBasis(degree=int(r.get("degree", 2)), ridge_scale=float(r.get("ridge", 1e-8)))


def run_experiment(name, cfg):
    """Run the named experiment; returns a list of Outcome.

    Model, grid, ladder and path-count overrides apply to single experiments;
    the full suite always runs the acceptance instances.
    """
    single = name != "full-suite"
    mdl = _build_model(cfg) if single else None
    grid = cfg.get("grid", {}) if single else {}
    lad = cfg.get("ladder", {}) if single else {}
    tol = cfg.get("tolerances", {})
    levels, eps0 = int(lad.get("levels", 5)), lad.get("eps0")
    opts = lambda P, seed: _opts(cfg, P, seed, single)
    out = []
    if name in ("forward-convergence", "full-suite"):
        P, seed = opts(10_000, 11)
        m0, refs = int(grid.get("m_delay", 2)), int(grid.get("refinements", 4))
        out.append(X.forward_convergence(model=mdl or "linear_delay", n_paths=P, seed=seed,
                                         m_levels=tuple(m0 * 2 ** i for i in range(refs + 1))))
        out.append(X.deterministic_drift())
        out.append(X.picard_equivalence(tol=float(tol.get("picard", 1e-10))))
    if name in ("bsde-oracle", "full-suite"):
        P, seed = opts(100_000, 5)
        out.append(X.bsde_oracle(n_paths=P, seed=seed))
    if name in ("spike-rates", "full-suite"):
        P, seed = opts(20_000, 7)
        kw = dict(model=mdl or "nonlinear_delay", seed=seed, levels=levels, eps0=eps0, basis=_basis(cfg))
        if "m_delay" in grid:
            kw["m_delay"] = int(grid["m_delay"])
        out.append(X.spike_rates(n_paths=P, **kw))
        out.extend(X.backward_rates(n_paths=max(2, P // 2), **kw))
    if name in ("adjoint-quadrature", "full-suite"):
        n_steps = 32
        if "m_delay" in grid:
            n_steps = int(round(float(grid.get("T", 1.0)) / float(grid.get("delta", 0.5)) * int(grid["m_delay"])))
        out.append(X.adjoint_quadrature(n_steps=n_steps, rel_tol=float(tol.get("quadrature_rel", 1e-4))))
        out.append(X.degeneration())
    if name in ("duality-residual", "full-suite"):
        P, seed = opts(40_000, 1000)
        out.append(X.expansion(n_paths=P, seed=seed, levels=levels, eps0=eps0))
        P, seed = opts(20_000, 500)
        out.append(X.duality(n_paths=P, seed=seed, levels=levels, eps0=eps0))
    if name in ("mp-scan", "full-suite"):
        P, seed = opts(10_000, 0)
        out.append(X.maximum_principle(classical_paths=P, delayed_paths=max(2, min(P, 2000) // 2 * 2), seed=seed))
    out.sort(key=lambda o: o.criterion)
    return out


def overall(results):
    vs = [r.verdict for r in results]
    if "fail" in vs:
        return "fail"
    if "inconclusive" in vs:
        return "inconclusive"
    return "pass"


# ------------------------------------------------------------------ persistence

def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def emit_report(results, directory, title=""):
    """Write report.txt and results.csv; an "ALL PASS" line when every item passed."""
    results = list(results)
    if not results:
        raise ValueError("no results to report")
    lines = [f"delaysmp report (schema v{SCHEMA_VERSION})"]
    if title:
        lines.append(title)
    verdict = overall(results)
    if verdict == "pass":
        lines.append(f"ALL PASS ({len(results)} items)")
    else:
        lines.append(f"OVERALL: {verdict.upper()}")
        lines.append(f"{'item':<6}{'verdict':<14}name")
        for r in results:
            lines.append(f"{r.criterion:<6}{r.verdict:<14}{r.name}")
    lines.append("")
    for r in results:
        lines.append(r.line)
    with open(os.path.join(directory, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_csv(os.path.join(directory, "results.csv"), ["criterion", "name", "verdict", "detail"],
               [(r.criterion, r.name, r.verdict, r.detail) for r in results])
    return verdict


def write_artifacts(results, directory):
    ladder = [(r.criterion, *row) for r in results for row in r.ladder]
    if ladder:
        _write_csv(os.path.join(directory, "ladder.csv"),
                   ["criterion", "quantity", "t0", "eps", "error", "stderr", "n_paths"],
                   [(c, q, t0, e, v, s, n) for c, q, t0, e, v, s, n in ladder])
    mp = [row for r in results for row in r.mp_rows]
    if mp:
        k = len(mp[0]) - 5
        cand = ["u_candidate"] if k == 1 else [f"u_candidate_{i}" for i in range(k)]
        _write_csv(os.path.join(directory, "mp_scan.csv"),
                   ["case", "t", *cand, "residual_mean", "residual_p05", "stderr"], mp)


def _final_dir(out, name):
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S")
    base = os.path.join(out, f"{name}-{stamp}")
    path, i = base, 1
    while os.path.exists(path):
        path, i = f"{base}-{i}", i + 1
    return path


def execute(name, cfg, out, log=print):
    """Run, persist atomically and return (exit status, artifact directory)."""
    os.makedirs(out, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".partial-", dir=out)
    try:
        with open(os.path.join(tmp, "config.json"), "w") as fh:
            json.dump(cfg, fh, indent=2, sort_keys=True)
            fh.write("\n")
        try:
            results = run_experiment(name, cfg)
            for r in results:
                log(f"{r.line}  ({r.seconds:.1f} s)")
            write_artifacts(results, tmp)
            status = emit_report(results, tmp, title=f"experiment: {name}")
        except (DelaySmpError, ValueError, KeyError, ArithmeticError, np.linalg.LinAlgError) as exc:
            with open(os.path.join(tmp, "report.txt"), "w") as fh:
                fh.write(f"delaysmp report (schema v{SCHEMA_VERSION})\nexperiment: {name}\n"
                         f"ERROR: {type(exc).__name__}: {exc}\n")
            status = "error"
            log(f"error: {type(exc).__name__}: {exc}")
        final = _final_dir(out, name)
        os.rename(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return EXIT[status], final


# ------------------------------------------------------------------ entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="delaysmp", description="Delayed forward-backward control laboratory.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in EXPERIMENTS.items():
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", default="runs", help="parent directory for the artifact directory")
        p.add_argument("--seed", type=int, help="override mc.seed")
        p.add_argument("--paths", type=int, help="override mc.n_paths")
        p.add_argument("--quiet", action="store_true")
    p = sub.add_parser("validate-config", help="check a configuration file and exit")
    p.add_argument("--config", required=True)
    p.add_argument("--quiet", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    log = (lambda *a, **k: None) if args.quiet else print
    try:
        cfg = load_config(args.config) if args.config else {}
    except ConfigInvalid as exc:
        print(f"config invalid: {exc} (field {exc.field}, line {exc.line})", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 1
    if args.command == "validate-config":
        log(f"config OK: experiment={cfg.get('experiment', '-')}")
        return 0
    if cfg.get("experiment", args.command) != args.command:
        print(f"config invalid: experiment {cfg['experiment']!r} does not match subcommand {args.command!r} "
              f"(field experiment, line {_line_of(open(args.config).read(), 'experiment')})", file=sys.stderr)
        return 1
    mc = dict(cfg.get("mc", {}))
    if args.seed is not None:
        mc["seed"] = args.seed
    if args.paths is not None:
        if args.paths < 2:
            print("--paths must be at least 2", file=sys.stderr)
            return 1
        mc["n_paths"] = args.paths
    if mc:
        cfg = {**cfg, "mc": mc}
    code, path = execute(args.command, cfg, args.out, log)
    log(f"artifacts: {path}")
    log(f"exit status {code}")
    return code
