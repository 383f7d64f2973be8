"""Command line experiment runner.

Every subcommand writes ``<name>.json`` (results, with a schema version)
and ``<name>.csv`` (a plot-ready series) into the output directory, plus
``config.json`` holding the exact settings used.  Passing that file back
through ``--config`` re-runs the experiment.

Exit codes: 0 success, 2 invalid config, 3 numeric failure, 4 steering
stalled, 5 certification failure.  Errors are printed to stderr as one
JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .deformation import (
    BumpProfile,
    ModelDeformation,
    calibrate_cones,
    jacobian,
    principal_minor,
    q_of,
    sample_ball,
)
from .engine import (
    EstimatorConfig,
    SteeringConfig,
    SteeringPlan,
    build_round,
    design_round,
    measure_shift,
    predict_shift,
    psi_check,
    steer,
    steer_foliated_T3,
)
from .exceptions import InvalidInputError, LyapflexError, SteeringStalledError, _plain
from .lattice import (
    HyperbolicAutomorphism,
    build_polynomial,
    companion,
    default_pattern,
    matrix_from_json,
    matrix_to_json,
)
from .majorization import validate_target
from .spectrum import estimate_spectrum
from .torusmap import PerturbedMap, check_damping

SCHEMA_VERSION = 1
OUTPUT_ENV = "LYAPFLEX_OUTPUT_DIR"
DEFAULT_OUTPUT = "lyapflex-out"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_STALLED = 4
EXIT_CERTIFICATION = 5

# residual thresholds for verify
MINOR_TOL = 1e-10
VOLUME_TOL = 1e-10


class CertificationFailure(LyapflexError):
    kind = "certification-failed"
    exit_code = EXIT_CERTIFICATION


def _fmt(v):
    """Full double precision for floats, plain text otherwise."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else str(float(v))
    return str(v)


class Output:
    """Writer confined to one directory."""

    def __init__(self, root):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        p = (self.root / name).resolve()
        if self.root not in p.parents:
            raise InvalidInputError("output name leaves the output directory", field="name")
        return p

    def json(self, name, obj):
        body = {"schema_version": SCHEMA_VERSION}
        body.update(_plain(obj))
        with open(self.path(name), "w") as fh:
            json.dump(body, fh, indent=2, default=_plain)
            fh.write("\n")

    def csv(self, name, schema, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            fh.write(f"# lyapflex {schema} schema v{SCHEMA_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])


# ----------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidInputError(message, field="arguments")


def _floats(text, field):
    try:
        vals = [float(v) for v in str(text).split(",")]
    except ValueError:
        parts = str(text).split(",")
        bad = next(i for i, v in enumerate(parts) if not _is_float(v))
        raise InvalidInputError(f"{field} entry {bad} is not a number: {parts[bad]!r}",
                                field=f"{field}[{bad}]") from None
    for i, v in enumerate(vals):
        if not math.isfinite(v):
            raise InvalidInputError(f"{field} entry {i} is not finite", field=f"{field}[{i}]")
    return vals


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def _load_matrix(path):
    if path is None:
        raise InvalidInputError("--matrix is required", field="matrix")
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read matrix file: {exc}", field="matrix") from None
    return HyperbolicAutomorphism(matrix_from_json(obj))


def _load_map(args):
    if getattr(args, "map", None):
        try:
            with open(args.map) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read map file: {exc}", field="map") from None
        return PerturbedMap.from_json(obj.get("map", obj))
    return _load_matrix(args.matrix)


def _estimator(args):
    return EstimatorConfig(args.orbits, args.length, args.burn_in, args.seed, args.threads)


def build_parser():
    p = _Parser(prog="lyapflex", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="JSON file of settings; explicit flags win")
    p.add_argument("--output-dir", default=None,
                   help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def estimator_flags(sp, orbits=16, length=20000, burn_in=100):
        sp.add_argument("--orbits", type=int, default=orbits)
        sp.add_argument("--length", type=int, default=length)
        sp.add_argument("--burn-in", type=int, default=burn_in)

    sp = sub.add_parser("construct-matrix", help="lattice matrix with a prescribed pattern")
    sp.add_argument("--dim", type=int, required=False)
    sp.add_argument("--index", type=int, required=False)
    sp.add_argument("--base", type=int, default=3)

    sp = sub.add_parser("spectrum", help="estimate the Lyapunov spectrum")
    sp.add_argument("--matrix")
    sp.add_argument("--map", help="perturbed map JSON (as written by deform or steer)")
    sp.add_argument("--checkpoints", type=int, default=10)
    estimator_flags(sp)

    sp = sub.add_parser("q-table", help="tabulate Q(s)")
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--c", type=float, default=3.0)
    sp.add_argument("--j", type=int, default=1)
    sp.add_argument("--points", type=int, default=51)

    sp = sub.add_parser("deform", help="one perturbation round")
    sp.add_argument("--matrix")
    sp.add_argument("--mode", choices=("rigorous", "empirical"), default="rigorous")
    sp.add_argument("--radius", type=float, default=0.02)
    sp.add_argument("--budget", type=int, default=64)
    sp.add_argument("--candidates", type=int, default=2000)
    sp.add_argument("--margin", type=float, default=2.0)
    sp.add_argument("--amplitudes", help="comma separated b_j")
    sp.add_argument("--delta0", type=float)
    sp.add_argument("--nu", type=float)
    sp.add_argument("--N", type=int)
    sp.add_argument("--t", help="comma separated parameter point (default all ones)")
    sp.add_argument("--c", type=float, default=3.0)
    sp.add_argument("--psi-samples", type=int, default=20000)
    sp.add_argument("--damping-samples", type=int, default=100000)
    estimator_flags(sp, 64, 4000, 50)

    for name in ("steer", "steer-t3"):
        sp = sub.add_parser(name, help="steer toward a target spectrum"
                            + (" keeping lambda_3 fixed" if name == "steer-t3" else ""))
        sp.add_argument("--matrix")
        sp.add_argument("--target")
        sp.add_argument("--tol", type=float, default=1e-2)
        sp.add_argument("--step-max", type=float, default=0.04)
        sp.add_argument("--radius", type=float, default=0.08)
        sp.add_argument("--resume", help="plan JSON to continue from")
        estimator_flags(sp, 64, 2000, 50)

    sp = sub.add_parser("verify", help="standalone checks")
    sp.add_argument("--check", choices=("majorization", "cones", "volume", "minors"))
    sp.add_argument("--dim", type=int, default=3)
    sp.add_argument("--c", type=float, default=3.0)
    sp.add_argument("--samples", type=int, default=10000)
    sp.add_argument("--nu", type=float, default=0.05)
    sp.add_argument("--target", help="for majorization: comma separated xi")
    sp.add_argument("--base-spectrum", help="for majorization: comma separated lambda")
    sp.add_argument("--index", type=int, help="for majorization: unstable index u")
    return p


# ----------------------------------------------------------------------
# subcommands


def cmd_construct_matrix(args, out):
    if args.dim is None or args.index is None:
        raise InvalidInputError("--dim and --index are required", field="dim")
    pat = default_pattern(args.dim, args.index, args.base)
    poly = build_polynomial(pat)
    L = companion(poly)
    out.json("construct-matrix.json", {
        "matrix": matrix_to_json(L.matrix),
        "pattern": list(pat.a),
        "base": pat.b,
        "polynomial": list(poly.coefficients),
        "polynomial_text": str(poly),
        "eigenvalues": L.eigenvalues.tolist(),
        "spectrum": L.spectrum.entries.tolist(),
        "unstable_index": L.unstable_index,
    })
    out.csv("construct-matrix.csv", "construct-matrix", ["i", "pattern", "eigenvalue", "exponent"],
            [(i + 1, a, ev, lam) for i, (a, ev, lam)
             in enumerate(zip(pat.a, L.eigenvalues, L.spectrum.entries))])
    return EXIT_OK


def cmd_spectrum(args, out):
    f = _load_map(args)
    est = estimate_spectrum(f, args.orbits, args.length, args.burn_in, args.seed, args.threads,
                            checkpoints=args.checkpoints)
    res = est.to_json()
    res["map"] = f.to_json()
    out.json("spectrum.json", res)
    d = est.dim
    rows = []
    for k, orbit in enumerate(est.per_orbit):
        rows.append(["final", k, est.length] + list(orbit))
    for n, partial in est.checkpoints:
        for k, orbit in enumerate(partial):
            rows.append(["checkpoint", k, n] + list(orbit))
    out.csv("spectrum.csv", "spectrum", ["kind", "orbit", "steps"]
            + [f"lambda_{i + 1}" for i in range(d)], rows)
    return EXIT_OK


def cmd_q_table(args, out):
    profile = BumpProfile(args.c)
    s = np.linspace(0.0, 1.0, args.points)
    q = [q_of(v, profile, args.dim, args.j) for v in s]
    out.json("q-table.json", {"dim": args.dim, "c": args.c, "j": args.j,
                              "s": s.tolist(), "q": q})
    out.csv("q-table.csv", "q-table", ["s", "Q"], zip(s, q))
    return EXIT_OK


def cmd_deform(args, out):
    L = _load_matrix(args.matrix)
    amps = None if args.amplitudes is None else _floats(args.amplitudes, "amplitudes")
    t = None if args.t is None else _floats(args.t, "t")
    rnd = design_round(L, radius=args.radius, budget=args.budget, N=args.N, delta0=args.delta0,
                       amplitudes=amps, nu=args.nu, mode=args.mode,
                       profile=BumpProfile(args.c), margin=args.margin,
                       candidates=args.candidates, t=t, seed=args.seed)
    ft = build_round(rnd)
    pred = predict_shift(rnd)
    cfg = _estimator(args)
    meas = measure_shift(L, ft, cfg)
    psi = [psi_check(rnd, j, samples=args.psi_samples, config=cfg, seed=args.seed).to_dict()
           for j in range(1, L.dim)]
    damping = None
    if rnd.params is not None:
        damping = check_damping(ft, rnd.params, samples=args.damping_samples,
                                seed=args.seed).to_dict()
    slack = pred.slack(meas.stderr)
    within = np.abs(meas.values - pred.values) <= slack
    out.json("deform.json", {
        "round": rnd.to_json(),
        "map": ft.to_json(),
        "prediction": pred.to_json(),
        "measurement": meas.to_json(),
        "within_prediction": within.tolist(),
        "psi": psi,
        "damping": damping,
    })
    out.csv("deform.csv", "deform",
            ["j", "predicted", "band", "measured", "stderr", "within"],
            [(j + 1, pred.values[j], pred.band, meas.values[j], meas.stderr[j], bool(within[j]))
             for j in range(L.dim - 1)])
    if damping is not None and not damping["passed"]:
        raise CertificationFailure("damping conditions fail for the constructed round",
                                   report=damping)
    return EXIT_OK


def _steer_config(args):
    return SteeringConfig(tol=args.tol, step_max=args.step_max, radius=args.radius,
                          estimator=_estimator(args), seed=args.seed)


def _write_plan(out, name, plan):
    out.json(f"{name}.json", {"plan": plan.to_json()})
    rows = [(0, "", "", list(np.cumsum(plan.start)[:-1]), "", "start")]
    for s in plan.steps:
        rows.append((s.index, list(s.target), list(s.t), list(s.summed), list(s.summed_stderr),
                     s.mode))
    flat = []
    for step, target, t, summed, se, mode in rows:
        fields = [step, mode]
        for v in (target, summed, se, t):
            fields.append(";".join(_fmt(float(x)) for x in v) if v != "" else "")
        flat.append(fields)
    out.csv(f"{name}.csv", name, ["step", "certification_mode", "target_hat", "measured_hat",
                                  "stderr_hat", "t"], flat)


def cmd_steer(args, out, foliated=False):
    name = "steer-t3" if foliated else "steer"
    L = _load_matrix(args.matrix)
    if args.target is None:
        raise InvalidInputError("--target is required", field="target")
    xi = _floats(args.target, "target")
    if len(xi) != L.dim:
        raise InvalidInputError(f"target needs {L.dim} entries, got {len(xi)}", field="target")
    cfg = _steer_config(args)
    resume = None
    if args.resume:
        with open(args.resume) as fh:
            obj = json.load(fh)
        resume = SteeringPlan.from_json(obj.get("plan", obj))
    try:
        if foliated:
            plan = steer_foliated_T3(L, xi, cfg, resume=resume)
        else:
            plan = steer(L, xi, cfg, resume=resume)
    except SteeringStalledError as exc:
        if exc.plan is not None:
            _write_plan(out, name, exc.plan)
        raise
    _write_plan(out, name, plan)
    if not plan.complete:
        raise SteeringStalledError("final spectrum misses the target", plan=plan,
                                   final=plan.final_spectrum, target=xi)
    return EXIT_OK


def cmd_verify(args, out):
    check = args.check
    if check is None:
        raise InvalidInputError("--check is required", field="check")
    rng = np.random.default_rng(args.seed)
    d = args.dim
    profile = BumpProfile(args.c)
    if check == "majorization":
        if args.target is None or args.base_spectrum is None or args.index is None:
            raise InvalidInputError("majorization needs --target, --base-spectrum and --index",
                                    field="target")
        xi = _floats(args.target, "target")
        lam = _floats(args.base_spectrum, "base-spectrum")
        rep = validate_target(xi, lam, args.index)
        out.json("verify.json", {"check": check, "report": rep.to_dict()})
        diff = np.cumsum(lam)[:-1] - np.cumsum(xi)[:-1]
        out.csv("verify.csv", "verify-majorization", ["j", "prefix_gap"],
                [(j + 1, v) for j, v in enumerate(diff)])
        if not rep.passed:
            raise CertificationFailure("target is not strictly majorized", report=rep.to_dict())
        return EXIT_OK
    if check == "cones":
        m = ModelDeformation(d, profile)
        cones = calibrate_cones(m, args.nu, random_draws=args.samples, seed=args.seed)
        out.json("verify.json", {"check": check, "cones": cones.to_json()})
        out.csv("verify.csv", "verify-cones", ["alpha", "beta", "gamma", "kappa", "nu"],
                [(cones.alpha, cones.beta, cones.gamma, cones.kappa, cones.nu)])
        return EXIT_OK
    # minors and volume: random points and parameters in the unit ball
    z = sample_ball(rng, args.samples, d)
    t = rng.random((args.samples, d - 1))
    rows = []
    worst = 0.0
    for k in range(args.samples):
        m = ModelDeformation(d, profile, t[k])
        jac = jacobian(m, z[k])
        if check == "volume":
            r = abs(np.linalg.det(jac) - 1.0)
            rows.append((k, "", r))
            worst = max(worst, r)
            continue
        for j in range(1, d):
            direct = np.linalg.det(jac[:j, :j])
            r = abs(float(principal_minor(m, z[k], j)) - direct)
            rows.append((k, j, r))
            worst = max(worst, r)
    tol = VOLUME_TOL if check == "volume" else MINOR_TOL
    out.json("verify.json", {"check": check, "dim": d, "c": args.c, "samples": args.samples,
                             "max_residual": worst, "tolerance": tol})
    out.csv("verify.csv", f"verify-{check}", ["sample", "j", "residual"], rows)
    if not worst < tol:
        raise CertificationFailure(f"{check} residual {worst:.3g} exceeds {tol:g}",
                                   max_residual=worst)
    return EXIT_OK


COMMANDS = {
    "construct-matrix": cmd_construct_matrix,
    "spectrum": cmd_spectrum,
    "q-table": cmd_q_table,
    "deform": cmd_deform,
    "steer": cmd_steer,
    "steer-t3": lambda a, o: cmd_steer(a, o, foliated=True),
    "verify": cmd_verify,
}


def _apply_config(parser, argv):
    """Parse argv, using values from ``--config`` where a flag was not given."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read config: {exc}", field="config") from None
    if not isinstance(cfg, dict):
        raise InvalidInputError("config must be a JSON object", field="config")
    cfg = dict(cfg)
    cfg.pop("schema_version", None)
    command = cfg.pop("command", None)
    if args.command is None:
        if command is None:
            raise InvalidInputError("config names no command", field="command")
        args = parser.parse_args(list(argv) + [command])
    explicit = set()
    for tok in argv:
        if tok.startswith("--"):
            explicit.add(tok[2:].split("=")[0].replace("-", "_"))
    for key, value in cfg.items():
        if key in ("config",):
            continue
        if not hasattr(args, key):
            raise InvalidInputError(f"unknown config key {key!r}", field=key)
        if key not in explicit:
            setattr(args, key, value)
    return args


def run(argv=None):
    """Parse arguments, run one subcommand and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.command is None:
            raise InvalidInputError("no subcommand given", field="command")
        if args.threads < 1:
            raise InvalidInputError("--threads must be at least 1", field="threads")
        root = args.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
        out = Output(root)
        echo = {k: v for k, v in vars(args).items() if k not in ("config", "output_dir")}
        out.json("config.json", echo)
        return COMMANDS[args.command](args, out)
    except LyapflexError as exc:
        print(json.dumps(exc.to_dict(), default=_plain), file=sys.stderr)
        return exc.exit_code if exc.exit_code in (2, 3, 4, 5) else EXIT_NUMERIC
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(json.dumps({"error": "numeric-failure", "message": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
