"""Command-line front end: ``sfn-opt <subcommand> [flags]``.

Exit codes: 0 success, 1 usage/config error, 2 runtime error. Values come
from built-in defaults, then ``--config FILE.json``, then explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from ._io import atomic_write_json, atomic_write_text
from ._kernels import BACKEND
from .harness import ExperimentSpec, run_experiment, spectrum_snapshot
from .oracle import PROBLEMS, make_problem
from .optim import METHODS, OptimizerConfig
from . import stability as st

SUBCOMMANDS = ("run", "sweep", "spectrum", "stability", "verify-bounds")

_OPT_KEYS = ("alpha", "gamma", "rank", "grad_batch", "hess_batch", "oversample", "power_iters", "singular_tol")

COMMON = {
    "problem": "rosenbrock",
    "d": 10,
    "n": 50,
    "noise": 0.1,
    "cond": 10.0,
    "seed": None,
    "out": "out",
    "threads": 1,
    "init": "zero",
    "init_scale": 0.1,
}
OPTIMIZER = {
    "alpha": 1.0,
    "gamma": None,
    "rank": 10,
    "grad_batch": None,
    "hess_batch": None,
    "oversample": 10,
    "power_iters": 0,
    "singular_tol": 1e-12,
}
DEFAULTS = {
    "run": {**COMMON, **OPTIMIZER, "method": ["gd"], "iters": 100, "seeds": 1, "spectrum_at": [], "spectrum_rank": 20},
    "spectrum": {**COMMON, "rank": 20},
    "stability": {**COMMON, **OPTIMIZER, "problem": "stochastic-quadratic", "init": "gaussian", "method": "lrsfn",
                  "grad_batch": 8, "hess_batch": 8, "zeta": 0.5, "probes": 100, "simulate": False,
                  "replicates": 50, "steps": 200, "dt": None},
    "sweep": {**COMMON, **OPTIMIZER, "problem": "stochastic-quadratic", "init": "gaussian", "method": "gd",
              "grad_batch": 8, "hess_batch": 8, "dt": [0.01, 0.1, 1.0], "batches": ["8:8"], "replicates": 20, "steps": 100},
    "verify-bounds": {**COMMON, "problem": "finite-sum", "init": "gaussian", "init_scale": 0.5, "noise": 0.3,
                      "lemma": "A1", "probes": 200, "batches": None},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _batch_pair(text):
    try:
        a, b = text.split(":")
        return f"{int(a)}:{int(b)}"
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NX:NS, got {text!r}") from None


def build_parser():
    S = argparse.SUPPRESS
    p = _Parser(prog="sfn-opt", description="Low-rank saddle-free Newton optimizers, baselines and stability tools.")
    p.add_argument("--version", action="version", version=f"sfn-opt {__version__} ({BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", metavar="FILE", default=None, help="JSON file with default values for any flag")
        sp.add_argument("--problem", choices=PROBLEMS, default=S)
        sp.add_argument("--d", type=int, default=S, help="dimension")
        sp.add_argument("--n", type=int, default=S, help="samples (finite-sum problems)")
        sp.add_argument("--noise", type=float, default=S, help="sample noise (finite-sum problems)")
        sp.add_argument("--cond", type=float, default=S, help="condition number (stochastic-quadratic)")
        sp.add_argument("--seed", type=int, default=S, help="global seed (falls back to $SFN_OPT_SEED, then 0)")
        sp.add_argument("--out", default=S, help="output directory")
        sp.add_argument("--threads", type=int, default=S, help="worker cap")
        sp.add_argument("--init", choices=("zero", "gaussian"), default=S, help="initial point")
        sp.add_argument("--init-scale", type=float, default=S, help="std of the gaussian initial point")

    def optimizer(sp):
        sp.add_argument("--alpha", type=float, default=S, help="step length")
        sp.add_argument("--gamma", type=float, default=S, help="damping")
        sp.add_argument("--rank", type=int, default=S, help="LRSFN rank r")
        sp.add_argument("--grad-batch", type=int, default=S, help="gradient batch N_X")
        sp.add_argument("--hess-batch", type=int, default=S, help="Hessian batch N_S")
        sp.add_argument("--oversample", type=int, default=S)
        sp.add_argument("--power-iters", type=int, default=S)
        sp.add_argument("--singular-tol", type=float, default=S, help="Newton singularity guard")

    sp = sub.add_parser("run", help="run optimizers over seeds and write traces + summary")
    common(sp)
    optimizer(sp)
    sp.add_argument("--method", nargs="+", choices=METHODS, default=S)
    sp.add_argument("--iters", type=int, default=S)
    sp.add_argument("--seeds", type=int, default=S, help="number of seeds")
    sp.add_argument("--spectrum-at", type=int, nargs="*", default=S, help="iterations to snapshot the spectrum at")
    sp.add_argument("--spectrum-rank", type=int, default=S)

    sp = sub.add_parser("spectrum", help="randomized Hessian spectrum at the initial point")
    common(sp)
    sp.add_argument("--rank", type=int, default=S)

    sp = sub.add_parser("stability", help="step-length bound report (and optional simulation)")
    common(sp)
    optimizer(sp)
    sp.add_argument("--method", choices=("gd", "newton", "lrsfn"), default=S)
    sp.add_argument("--zeta", type=float, default=S)
    sp.add_argument("--probes", type=int, default=S, help="batch draws for expectation terms")
    sp.add_argument("--simulate", action="store_true", default=S, help="also propagate perturbations")
    sp.add_argument("--replicates", type=int, default=S)
    sp.add_argument("--steps", type=int, default=S)
    sp.add_argument("--dt", type=float, default=S, help="simulation step (default: the bound)")

    sp = sub.add_parser("sweep", help="stability phase diagram over step lengths and batch sizes")
    common(sp)
    optimizer(sp)
    sp.add_argument("--method", choices=("gd", "newton", "lrsfn"), default=S)
    sp.add_argument("--dt", type=float, nargs="+", default=S)
    sp.add_argument("--batches", type=_batch_pair, nargs="+", default=S, help="NX:NS pairs")
    sp.add_argument("--replicates", type=int, default=S)
    sp.add_argument("--steps", type=int, default=S)

    sp = sub.add_parser("verify-bounds", help="Monte Carlo check of the gradient/Hessian/direction error bounds")
    common(sp)
    sp.add_argument("--lemma", choices=("A1", "A2", "A4"), default=S)
    sp.add_argument("--probes", type=int, default=S, help="Monte Carlo draws per batch size")
    sp.add_argument("--batches", nargs="+", default=S, help="batch sizes (A1/A2) or NX:NS pairs (A4)")
    return p


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def load_config(path, command):
    """Read a JSON config; keys use flag names with ``_`` or ``-``."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise UsageError(f"--config {path}: top level must be an object")
    data = {k.replace("-", "_"): v for k, v in data.items()}
    data.pop("command", None)
    allowed = DEFAULTS[command]
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise UsageError(f"--config {path}: unknown field(s) for {command!r}: {', '.join(unknown)}")
    for k, v in data.items():
        ref = allowed[k]
        if v is None or ref is None:
            continue
        if isinstance(ref, bool):
            ok = isinstance(v, bool)
        elif isinstance(ref, int):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif isinstance(ref, float):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        elif isinstance(ref, list):
            ok = isinstance(v, list)
        else:
            ok = isinstance(v, str)
        if not ok:
            raise UsageError(f"--config {path}: field {k!r} has wrong type ({type(v).__name__})")
    return data


def resolve(args):
    cmd = args.command
    settings = dict(DEFAULTS[cmd])
    if args.config:
        settings.update(load_config(args.config, cmd))
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    settings.update(explicit)
    if settings["seed"] is None:
        env = os.environ.get("SFN_OPT_SEED")
        try:
            settings["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"SFN_OPT_SEED must be an integer, got {env!r}") from None
    if isinstance(settings.get("method"), str) and cmd == "run":
        settings["method"] = [settings["method"]]
    validate(cmd, settings)
    return settings


def _flag(key):
    return "--" + key.replace("_", "-")


def validate(cmd, s):
    def need(key, cond, what):
        if s.get(key) is not None and not cond(s[key]):
            raise UsageError(f"{_flag(key)} must be {what}, got {s[key]!r}")

    need("d", lambda x: x >= 1, ">= 1")
    need("n", lambda x: x >= 2, ">= 2")
    need("noise", lambda x: x >= 0, ">= 0")
    need("cond", lambda x: x >= 1, ">= 1")
    need("threads", lambda x: x >= 1, ">= 1")
    need("init_scale", lambda x: x >= 0, ">= 0")
    need("alpha", lambda x: x > 0, "> 0")
    need("gamma", lambda x: x >= 0, ">= 0")
    need("rank", lambda x: x >= 1, ">= 1")
    methods = s.get("method") if isinstance(s.get("method"), list) else [s.get("method")]
    if "lrsfn" in methods:
        need("rank", lambda x: x <= s["d"], f"<= d={s['d']} for lrsfn")
    need("grad_batch", lambda x: x >= 1, ">= 1")
    need("hess_batch", lambda x: x >= 1, ">= 1")
    need("oversample", lambda x: x >= 0, ">= 0")
    need("power_iters", lambda x: x >= 0, ">= 0")
    need("iters", lambda x: x >= 0, ">= 0")
    need("seeds", lambda x: x >= 1, ">= 1")
    need("zeta", lambda x: 0 < x < 1, "in (0, 1)")
    need("probes", lambda x: x >= 1, ">= 1")
    need("replicates", lambda x: x >= 1, ">= 1")
    need("steps", lambda x: x >= 1, ">= 1")
    need("spectrum_rank", lambda x: x >= 1, ">= 1")
    if cmd == "run":
        bad = [m for m in s["method"] if m not in METHODS]
        if bad:
            raise UsageError(f"--method: unknown method(s) {', '.join(bad)}")
    if cmd in ("stability", "sweep") and s["method"] not in ("gd", "newton", "lrsfn"):
        raise UsageError("--method must be gd, newton or lrsfn")
    if cmd == "sweep":
        if any(not dt > 0 for dt in s["dt"]):
            raise UsageError("--dt values must be > 0")
    if cmd == "stability" and s["dt"] is not None and not s["dt"] > 0:
        raise UsageError("--dt must be > 0")
    if s["problem"] in ("rosenbrock",) and s["d"] < 2:
        raise UsageError("--d must be >= 2 for rosenbrock")
    if cmd in ("stability", "sweep", "verify-bounds") and s["problem"] not in ("finite-sum", "stochastic-quadratic"):
        raise UsageError(f"--problem must be a finite-sum problem for {cmd}")


def config_json(settings):
    """Resolved settings as JSON; feeding it back via --config reproduces them."""
    return json.dumps(settings, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _oracle(s):
    params = {}
    if s["problem"] == "finite-sum":
        params = {"n": s["n"], "noise": s["noise"], "seed": s["seed"]}
    elif s["problem"] == "stochastic-quadratic":
        params = {"n": s["n"], "cond": s["cond"], "seed": s["seed"], "grad_noise": s["noise"]}
    return s["problem"], params


def _point(s, d):
    if s["init"] == "zero":
        return np.zeros(d)
    return np.random.default_rng(s["seed"]).normal(0.0, s["init_scale"], d)


def _opt_config(s, method, **extra):
    kw = {k: s[k] for k in _OPT_KEYS if k in s}
    return OptimizerConfig(method=method, seed=s["seed"], **kw, **extra)


def cmd_run(s):
    name, params = _oracle(s)
    cfgs = [_opt_config(s, m, max_iters=s["iters"]) for m in s["method"]]
    init = ("fixed", np.zeros(s["d"])) if s["init"] == "zero" else ("gaussian", s["init_scale"])
    spec = ExperimentSpec(name, s["d"], cfgs, n_seeds=s["seeds"], init=init, problem_params=params,
                          seed_offset=s["seed"], record_spectrum_at=tuple(s["spectrum_at"]),
                          spectrum_rank=s["spectrum_rank"], out_dir=s["out"], threads=s["threads"])
    res = run_experiment(spec)
    for r in res.rows:
        print(f"{r.method}: mean_best={r.mean_best:.6g} min_best={r.min_best:.6g} diverged={r.diverged}")
    return 0


def cmd_spectrum(s):
    name, params = _oracle(s)
    oracle = make_problem(name, s["d"], **params)
    w = _point(s, s["d"])
    eig = spectrum_snapshot(oracle, w, min(s["rank"], s["d"]), seed=s["seed"])
    out = {"problem": name, "d": s["d"], "rank": eig.rank, "eigenvalues": eig.lambdas.tolist()}
    atomic_write_json(os.path.join(s["out"], "spectrum.json"), out)
    print(json.dumps(out["eigenvalues"]))
    return 0


def cmd_stability(s):
    name, params = _oracle(s)
    oracle = make_problem(name, s["d"], **params)
    w = _point(s, s["d"])
    cfg = _opt_config(s, s["method"]).validate(oracle)
    rep = st.stability_report(oracle, w, cfg, zeta=s["zeta"], n_probes=s["probes"], seed=s["seed"])
    atomic_write_json(os.path.join(s["out"], "stability.json"), rep.to_dict())
    print(json.dumps(rep.to_dict(), sort_keys=True))
    if s["simulate"]:
        dt = s["dt"] if s["dt"] is not None else rep.dt_bound
        tr = st.simulate_perturbation(oracle, cfg, w, s["replicates"], s["steps"], seed=s["seed"], dt=dt)
        atomic_write_json(os.path.join(s["out"], "perturbation.json"), tr.to_dict())
        print(f"dt={dt:.6g} stable={tr.stable} max_mean_eta={tr.mean.max():.6g}")
    return 0


def cmd_sweep(s):
    name, params = _oracle(s)
    oracle = make_problem(name, s["d"], **params)
    w = _point(s, s["d"])
    cfg = _opt_config(s, s["method"])
    pairs = [tuple(int(x) for x in b.split(":")) for b in s["batches"]]
    for nx, ns in pairs:
        OptimizerConfig(**{**cfg.to_dict(), "grad_batch": nx, "hess_batch": ns}).validate(oracle)
    rows = st.stability_sweep(oracle, cfg, w, s["dt"], pairs, s["replicates"], s["steps"], seed=s["seed"])
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=["dt", "grad_batch", "hess_batch", "stable", "max_mean_eta"], lineterminator="\n")
    wr.writeheader()
    wr.writerows(rows)
    atomic_write_text(os.path.join(s["out"], "sweep.csv"), buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_verify_bounds(s):
    name, params = _oracle(s)
    oracle = make_problem(name, s["d"], **params)
    w = _point(s, s["d"])
    lemma = s["lemma"]
    draws = s["probes"]
    try:
        if lemma == "A4":
            pairs = [tuple(int(x) for x in str(b).split(":")) for b in (s["batches"] or ["2:2", "8:5", "32:10"])]
            sizes = [n for pr in pairs for n in pr]
        else:
            sizes = [int(b) for b in (s["batches"] or ([2, 8, 32] if lemma == "A1" else [2, 5, 10, 25]))]
    except ValueError:
        raise UsageError("--batches: expected integers (A1/A2) or NX:NS pairs (A4)") from None
    if any(not 1 <= n <= oracle.n_samples for n in sizes):
        raise UsageError(f"--batches: sizes must lie in [1, n={oracle.n_samples}]")
    if lemma == "A1":
        rows = st.check_gradient_bound(oracle, w, sizes, draws=draws, seed=s["seed"])
    elif lemma == "A2":
        rows = st.check_hessian_bound(oracle, w, sizes, draws=draws, seed=s["seed"])
    else:
        rows = st.check_newton_direction_bound(oracle, w, pairs, draws=draws, seed=s["seed"])
    report = {"lemma": lemma, "problem": name, "d": s["d"], "n": oracle.n_samples, "draws": draws,
              "seed": s["seed"], "rows": rows, "pass": all(r["pass"] for r in rows)}
    atomic_write_json(os.path.join(s["out"], f"verify_{lemma}.json"), report)
    print(json.dumps(report, sort_keys=True))
    return 0


HANDLERS = {
    "run": cmd_run,
    "spectrum": cmd_spectrum,
    "stability": cmd_stability,
    "sweep": cmd_sweep,
    "verify-bounds": cmd_verify_bounds,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        settings = resolve(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return HANDLERS[args.command](settings)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
