"""Command-line front end: ``simulate``, ``estimate-k``, ``verify`` and ``sweep``.

Exit codes: 0 all certified checks pass, 1 a certified check fails,
2 configuration error, 3 solver failure.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import io
from .dual import DualProblem, estimate_K, verify_interpolation, verify_perturbation
from .estimates import find_admissible_p, growth_vs_estimate, verify_discrete_duality
from .exceptions import AdmissibilityError, SolverError
from .grid import build_grid
from .models import DEFAULTS, builtin_model, check_structure
from .rothe import (MONITOR_COLUMNS, StepOptions, make_initial_state, monitor_check,
                    refinement_study, run)
from .reports import VerificationReport

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
SUITES = ("perturbation", "interpolation", "duality", "structure", "verdict")
FORMATS = ("json", "csv", "gnuplot")
MODEL_PARAMS = sorted({k for d in DEFAULTS.values() for k in d})


class ConfigError(Exception):
    pass


# -- argument parsing --------------------------------------------------------


def _add_common(sp, model=True, grid_n=64):
    sp.add_argument("--config", help="JSON file; its values override flags")
    sp.add_argument("--output", default="out", help="output directory")
    sp.add_argument("--formats", default="json,csv", help="comma list from json,csv,gnuplot")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dim", type=int, default=1)
    sp.add_argument("--n", type=int, default=grid_n)
    sp.add_argument("--length", type=float, default=1.0)
    if model:
        sp.add_argument("--model", default="bounded_quadratic")
        for key in MODEL_PARAMS:
            if key != "m":
                sp.add_argument(f"--{key}", type=float, default=None)
        sp.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")


def _add_time(sp, tau=None, steps=None):
    sp.add_argument("--tau", type=float, default=tau)
    sp.add_argument("--steps", type=int, default=steps)


def _add_stepping(sp):
    sp.add_argument("--u0", default=None,
                    help="constant:v1,v2 | perturbed:v1,v2 | gaussian | file:path")
    sp.add_argument("--scheme", default="picard", choices=("picard", "newton"))
    sp.add_argument("--tolerance", type=float, default=1e-10)
    sp.add_argument("--max-iter", type=int, default=200)
    sp.add_argument("--damping", type=float, default=1.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="rothedual", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the Rothe scheme and check monitors")
    _add_common(sim)
    sim.add_argument("--m", type=float, default=None, help="scalar_heat diffusivity")
    _add_time(sim)
    _add_stepping(sim)
    sim.add_argument("--snapshots", action="store_true", help="write every state as CSV")

    est = sub.add_parser("estimate-k", help="estimate the discrete regularity constant")
    _add_common(est, model=False, grid_n=256)
    est.add_argument("--m", type=float, default=1.0)
    est.add_argument("--p", type=float, default=2.0)
    _add_time(est, tau=1.0, steps=1)
    est.add_argument("--method", default="eigenmode",
                     choices=("eigenmode", "random", "power", "dense_oracle"))
    est.add_argument("--trials", type=int, default=100)
    est.add_argument("--restarts", type=int, default=20)
    est.add_argument("--jobs", type=int, default=None)

    ver = sub.add_parser("verify", help="run a verification suite")
    ver.add_argument("--suite", required=True, choices=SUITES)
    _add_common(ver)
    ver.add_argument("--m", type=float, default=None)
    _add_time(ver)
    _add_stepping(ver)
    ver.add_argument("--p", type=float, default=2.0)
    ver.add_argument("--q", type=float, default=6.0)
    ver.add_argument("--r", type=float, default=3.0)
    ver.add_argument("--a", type=float, default=1.0)
    ver.add_argument("--b", type=float, default=2.0)
    ver.add_argument("--trials", type=int, default=200)
    ver.add_argument("--samples", type=int, default=10_000)
    ver.add_argument("--box", type=float, default=1e3)
    ver.add_argument("--p-star", type=float, default=None)
    ver.add_argument("--p-max", type=float, default=3.0)
    ver.add_argument("--p-steps", type=int, default=5)

    sw = sub.add_parser("sweep", help="time-step refinement or exponent sweep")
    sw.add_argument("--kind", default="tau", choices=("tau", "p"))
    _add_common(sw)
    sw.add_argument("--m", type=float, default=None)
    _add_time(sw)
    _add_stepping(sw)
    sw.add_argument("--T", type=float, default=1.0)
    sw.add_argument("--tau-list", default="0.0625,0.03125,0.015625,0.0078125")
    sw.add_argument("--p", type=float, default=2.0)
    sw.add_argument("--a", type=float, default=1.0)
    sw.add_argument("--b", type=float, default=2.0)
    sw.add_argument("--p-max", type=float, default=3.0)
    sw.add_argument("--p-steps", type=int, default=5)
    return parser


# -- config merging ----------------------------------------------------------

_NESTED = {
    "grid": {"dim": "dim", "n": "n", "length": "length"},
    "time": {"tau": "tau", "steps": "steps", "T": "T", "tau_list": "tau_list"},
    "exponent": {"p": "p", "q": "q", "r": "r", "p_max": "p_max", "p_star": "p_star"},
    "estimation": {"method": "method", "trials": "trials", "seed": "seed",
                   "restarts": "restarts"},
    "step_options": {"scheme": "scheme", "tolerance": "tolerance", "max_iter": "max_iter",
                     "damping": "damping"},
}


def apply_config(args, config):
    """Overlay a JSON config on parsed flags; unknown keys are errors."""
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    if "command" in config and config["command"] != args.command:
        raise ConfigError(f"config is for {config['command']!r}, not {args.command!r}")
    for key, value in config.items():
        if key == "command":
            continue
        if key == "model":
            if isinstance(value, dict):
                args.model = value.get("name", getattr(args, "model", None))
                args.config_params = dict(value.get("params", {}))
            else:
                args.model = value
        elif key == "params":
            args.config_params = dict(value)
        elif key in ("U0", "u0"):
            args.u0 = value
        elif key == "output":
            if isinstance(value, dict):
                args.output = value.get("directory", args.output)
                if "formats" in value:
                    args.formats = ",".join(value["formats"])
            else:
                args.output = value
        elif key in _NESTED:
            for sub, dest in _NESTED[key].items():
                if sub in value:
                    _set(args, dest, value[sub])
            extra = set(value) - set(_NESTED[key])
            if extra:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(extra)}")
        else:
            _set(args, key.replace("-", "_"), value)
    return args


def _set(args, dest, value):
    if not hasattr(args, dest):
        raise ConfigError(f"unknown config key {dest!r} for {args.command}")
    if dest == "tau_list" and isinstance(value, list):
        value = ",".join(str(v) for v in value)
    setattr(args, dest, value)


def _formats(args):
    fmts = [f.strip() for f in str(args.formats).split(",") if f.strip()]
    bad = set(fmts) - set(FORMATS)
    if bad:
        raise ConfigError(f"unknown formats {sorted(bad)}")
    return fmts


def _model(args):
    params = dict(getattr(args, "config_params", {}) or {})
    for key in MODEL_PARAMS:
        val = getattr(args, key, None)
        if val is not None and key in DEFAULTS.get(args.model, {}):
            params.setdefault(key, val)
    for item in args.param:
        key, _, val = item.partition("=")
        if not _:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        params[key] = float(val)
    return builtin_model(args.model, params)


def _grid(args):
    return build_grid(args.dim, args.n, args.length)


def _initial(args, grid, model):
    init = args.u0 or {"kind": "perturbed", "values": [0.5] * model.species}
    if isinstance(init, str):
        kind, _, rest = init.partition(":")
        if kind == "file":
            init = {"kind": "file", "path": rest}
        elif kind in ("constant", "perturbed"):
            vals = [float(v) for v in rest.split(",")] if rest else [1.0]
            init = {"kind": kind, "values": vals}
        elif kind == "gaussian":
            init = {"kind": "gaussian"}
        else:
            raise ConfigError(f"unknown --u0 {args.u0!r}")
    vals = init.get("values")
    if vals is not None and len(vals) not in (1, model.species):
        raise ConfigError(f"--u0 needs 1 or {model.species} values")
    return make_initial_state(grid, model.species, init)


def _options(args):
    return StepOptions(args.scheme, args.tolerance, args.max_iter, args.damping)


def _require(parser, args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        parser.error("missing required option(s): " + ", ".join("--" + m for m in missing))


def _config_echo(args):
    return {k: v for k, v in sorted(vars(args).items()) if v is not None and k != "config"}


# -- commands ----------------------------------------------------------------


class Outputs:
    def __init__(self, directory, formats):
        self.directory = directory
        self.formats = formats
        self.files = []
        os.makedirs(directory, exist_ok=True)

    def path(self, name):
        self.files.append(name)
        return os.path.join(self.directory, name)

    def json(self, name, obj):
        if "json" in self.formats:
            io.write_json(self.path(name), obj)

    def csv(self, name, rows, columns):
        if "csv" in self.formats:
            io.write_csv(self.path(name), rows, columns)
        if "gnuplot" in self.formats:
            stem = os.path.splitext(name)[0]
            io.write_gnuplot(self.directory, stem, rows, columns)
            self.files += [stem + ".dat", stem + ".gp"]


def _report_trajectory(out, tr, snapshots=False):
    out.csv("monitors.csv", tr.monitor_rows(), MONITOR_COLUMNS)
    report = monitor_check(tr)
    out.json("monitor_report.json", report)
    out.json("trajectory.json", {
        "model": tr.model.name, "params": tr.model.params, "grid": tr.grid.summary(),
        "tau": tr.tau, "N": tr.N, "final_state": tr.states[-1],
        "mass": tr.monitors["mass"], "entropy": tr.monitors["entropy"],
    })
    if snapshots:
        for k, U in enumerate(tr.states):
            io.write_atomic(out.path(f"state_{k:05d}.csv"), io.state_to_csv(U))
    return report


def cmd_simulate(args, parser, out):
    _require(parser, args, "tau", "steps")
    model = _model(args)
    grid = _grid(args)
    tr = run(model, grid, _initial(args, grid, model), args.tau, args.steps, _options(args))
    report = _report_trajectory(out, tr, args.snapshots)
    print(f"simulate {model.name}: {'pass' if report.passed else 'VIOLATION'} "
          f"(mass {tr.monitors['mass'][0]:.6g} -> {tr.monitors['mass'][-1]:.6g})")
    return EXIT_OK if report.passed else EXIT_VIOLATION


def cmd_estimate_k(args, parser, out):
    _require(parser, args, "tau", "steps")
    if not 1 < args.p < np.inf:
        raise ConfigError("p must lie in (1, inf)")
    est = estimate_K(_grid(args), args.m, args.p, args.tau, args.steps, method=args.method,
                     trials=args.trials, seed=args.seed, restarts=args.restarts, n_jobs=args.jobs)
    out.json("estimate.json", est)
    out.csv("trials.csv", est.trial_rows(), ("trial", "ratio"))
    print(f"K_hat(m={args.m}, p={args.p}) = {est.K_hat:.12g} [{args.method}]")
    return EXIT_OK


def _midpoint_K(grid, a, b, p, tau, N, seed):
    """Exact constant at ``p = 2``; a power-method lower bound otherwise."""
    m = 0.5 * (a + b)
    if p == 2:
        return 1.0 / m, "exact"
    small = build_grid(grid.dim, min(grid.n, 32), grid.length)
    return estimate_K(small, m, p, tau, min(N, 16), method="power", seed=seed).K_hat, "power"


def _suite_perturbation(args, parser, out):
    _require(parser, args, "tau", "steps")
    grid = _grid(args)
    K, how = _midpoint_K(grid, args.a, args.b, args.p, args.tau, args.steps, args.seed)
    rng = np.random.default_rng(args.seed)
    summary = VerificationReport("perturbation", info={"trials": args.trials, "K_method": how})
    rows = []
    for t in range(args.trials):
        shape = (args.steps, grid.node_count)
        prob = DualProblem(grid, args.tau, rng.uniform(args.a, args.b, shape),
                           rng.standard_normal(shape), lower=args.a, upper=args.b)
        rep = verify_perturbation(prob, args.p, K, K_method=how)
        for rec in rep.records:
            rows.append({"trial": t, **{k: v for k, v in rec.to_dict().items()
                                        if k in ("inequality", "lhs", "rhs", "margin", "pass",
                                                 "certified")}})
            worst = next((r for r in summary.records if r.inequality == rec.inequality), None)
            if worst is None:
                summary.add(rec)
            elif (rec.certified and not rec.passed) or rec.margin / rec.rhs < worst.margin / worst.rhs:
                summary.records[summary.records.index(worst)] = rec
    out.csv("trials.csv", rows, ("trial", "inequality", "lhs", "rhs", "margin", "pass",
                                 "certified"))
    return summary


def _suite_interpolation(args, parser, out):
    grid = _grid(args)
    return verify_interpolation(grid, args.m or 1.0, args.tau or 1.0, args.steps or 3,
                                args.p, args.q, args.r, seed=args.seed)


def _suite_duality(args, parser, out):
    _require(parser, args, "tau", "steps")
    model = _model(args)
    grid = _grid(args)
    tr = run(model, grid, _initial(args, grid, model), args.tau, args.steps, _options(args))
    mon = _report_trajectory(out, tr)
    a, b = model.bounds
    if not np.isfinite(b):
        raise AdmissibilityError(f"model {model.name!r} has unbounded pressures")
    K, how = _midpoint_K(grid, a, b, args.p, args.tau, args.steps, args.seed)
    rep = VerificationReport("duality", info={"monitors_pass": mon.passed})
    rep.add(verify_discrete_duality(tr, args.p, K, K_method=how))
    return rep, mon.passed


def _suite_structure(args, parser, out):
    model = _model(args)
    rep = check_structure(model, args.samples, args.box, args.seed)
    out.json("structure.json", rep)
    return rep


def _suite_verdict(args, parser, out):
    model = _model(args)
    v = growth_vs_estimate(model, p_star=args.p_star, p_max=args.p_max, steps=args.p_steps,
                           seed=args.seed)
    out.json("verdict.json", v)
    return v


def cmd_verify(args, parser, out):
    suite = args.suite
    if suite == "perturbation":
        rep = _suite_perturbation(args, parser, out)
        ok = rep.passed
    elif suite == "interpolation":
        rep = _suite_interpolation(args, parser, out)
        ok = rep.passed
    elif suite == "duality":
        rep, mon_ok = _suite_duality(args, parser, out)
        ok = rep.passed and mon_ok
    elif suite == "structure":
        rep = _suite_structure(args, parser, out)
        ok = rep.passed
    else:
        rep = _suite_verdict(args, parser, out)
        ok = True  # a verdict is informational
        print(f"verdict {rep.model}: {rep.verdict} (p_star={rep.p_star})")
    if suite != "verdict":
        out.json("report.json", rep)
        print(f"verify {suite}: {'pass' if ok else 'VIOLATION'}")
        for rec in getattr(rep, "records", []):
            d = rec.to_dict()
            if d["pass"] is None:
                tag = "skipped"
            else:
                tag = "pass" if d["pass"] else ("FAIL" if d.get("certified", True) else "info")
            name = d.get("inequality", d.get("hypothesis"))
            print(f"  {name}: {tag} margin={d.get('margin')}")
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_sweep(args, parser, out):
    if args.kind == "tau":
        taus = [float(t) for t in str(args.tau_list).split(",") if t.strip()]
        if not taus:
            raise ConfigError("tau list is empty")
        model = _model(args)
        grid = _grid(args)
        rep = refinement_study(model, grid, _initial(args, grid, model), args.T, taus, args.p,
                               _options(args))
        out.json("refinement.json", rep)
        out.csv("refinement.csv", rep.rows(), ("tau", "norm", "rel_diff"))
        print(f"refinement: rel_diffs={rep.rel_diffs}")
        return EXIT_OK
    _require(parser, args, "tau", "steps")
    res = find_admissible_p(args.a, args.b, _grid(args), args.tau, args.steps, args.p_max,
                            args.p_steps, seed=args.seed)
    out.json("admissible.json", res)
    out.csv("admissible.csv", res.csv_rows(), ("p", "K_hat", "oscillation_times_K", "admissible"))
    print(f"p_star = {res.p_star}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate-k": cmd_estimate_k, "verify": cmd_verify,
            "sweep": cmd_sweep}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        if args.config:
            try:
                with open(args.config) as fh:
                    config = json.load(fh)
            except (OSError, json.JSONDecodeError) as err:
                raise ConfigError(f"cannot read config: {err}") from err
            apply_config(args, config)
        out = Outputs(args.output, _formats(args))
        code = COMMANDS[args.command](args, parser, out)
        status = {EXIT_OK: "pass", EXIT_VIOLATION: "violation"}[code]
    except SolverError as err:
        print(f"solver failure: {err}", file=sys.stderr)
        code, status = EXIT_SOLVER, "solver-failure"
    except (ConfigError, ValueError, KeyError, OSError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    io.write_manifest(args.output, args.command, _config_echo(args), out.files, status, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
