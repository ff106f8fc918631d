"""Command-line front end: ``betawave <subcommand> [options]``.

Exit codes: 0 success, 2 gate or resonance exit, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import fnmatch
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .diophantine import ResonanceError
from .model import ConfigError, ProblemConfig

FORMAT_VERSION = "1.0"
log = logging.getLogger("betawave")
SUBCOMMANDS = ("approx", "reduce", "solve", "sweep", "measure", "validate", "compare")


class GateExit(Exception):
    """Expected outcome class: a run stopped at a non-resonance gate."""


# serialization ----------------------------------------------------------------------

def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def write_csv(path: Path, rows: Sequence[Mapping]) -> None:
    if not rows:
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: to_jsonable(r.get(k, "")) for k in keys})


def make_report(subcommand: str, cfg: ProblemConfig, seed: int, payload: dict, timing: dict) -> dict:
    echo = cfg.to_dict()
    echo["derived"] = cfg.derived()
    return to_jsonable({"format_version": FORMAT_VERSION, "subcommand": subcommand, "seed": seed,
                        "config": echo, "payload": payload, "timing": timing})


# report comparison ---------------------------------------------------------------------

def _flatten(obj: Any, prefix: str = "") -> dict[str, Any]:
    out = {}
    if isinstance(obj, Mapping):
        for k, v in obj.items():
            out.update(_flatten(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            out.update(_flatten(v, f"{prefix}[{i}]"))
    else:
        out[prefix] = obj
    return out


def compare_reports(a: Mapping, b: Mapping, tolerances: Mapping[str, float] | None = None,
                    default_rtol: float = 1e-12, ignore: Sequence[str] = ("timing.*",)) -> dict:
    """Fieldwise diff; tolerances map glob patterns on dotted paths to relative tolerances."""
    if a.get("format_version") != b.get("format_version"):
        raise ValueError(f"format_version mismatch: {a.get('format_version')} vs {b.get('format_version')}")
    tolerances = dict(tolerances or {})
    fa, fb = _flatten(a), _flatten(b)
    diffs = []
    for key in sorted(set(fa) | set(fb)):
        if any(fnmatch.fnmatch(key, pat) for pat in ignore):
            continue
        if key not in fa or key not in fb:
            diffs.append({"field": key, "reason": "missing", "a": fa.get(key), "b": fb.get(key)})
            continue
        x, y = fa[key], fb[key]
        tol = next((t for pat, t in tolerances.items() if fnmatch.fnmatch(key, pat)), default_rtol)
        if isinstance(x, bool) or isinstance(y, bool) or not isinstance(x, (int, float)) \
                or not isinstance(y, (int, float)):
            if x != y:
                diffs.append({"field": key, "reason": "value", "a": x, "b": y})
            continue
        scale = max(abs(x), abs(y))
        if abs(x - y) > tol * scale and abs(x - y) > 0:
            diffs.append({"field": key, "reason": "numeric", "a": x, "b": y,
                          "rel": abs(x - y) / scale if scale else 0.0, "tol": tol})
    return {"equal": not diffs, "n_diffs": len(diffs), "diffs": diffs}


# pipelines ----------------------------------------------------------------------------------

def _omega(args, cfg: ProblemConfig, rng: np.random.Generator) -> np.ndarray:
    if args.omega:
        w = np.array([float(x) for x in args.omega.split(",")])
        if w.shape != (cfg.nu,):
            raise ConfigError(f"omega: expected {cfg.nu} components")
        return w
    from .diophantine import admissible_sampler
    return admissible_sampler(cfg, rng, 1)[0][0]


def run_approx(cfg, args, rng):
    from .approx import build_v_app
    omega = _omega(args, cfg, rng)
    sol = build_v_app(cfg, omega)
    payload = {"omega": omega, **sol.summary()}
    rows = [{"n": r["n"], "v_norm": r["v"], "q_norm": r["q"]} for r in sol.norms]
    return payload, {"approx.csv": rows}


def run_reduce(cfg, args, rng):
    from .approx import build_v_app
    from .reduce import conjugation_oracle, invert_linearized, reduce_linearized
    omega = _omega(args, cfg, rng)
    w = build_v_app(cfg, omega).v_app
    if args.from_solution:
        from .nashmoser import nash_moser_solve
        w = nash_moser_solve(cfg, omega).w
    st, state = reduce_linearized(w, cfg, omega, reversible=args.reversible)
    chain = invert_linearized(w, cfg, omega, "reduction_chain", state=state)
    dense = invert_linearized(w, cfg, omega, "dense_lu")
    g = w if np.any(w.flat) else cfg.forcing
    a, b = chain.solve_flat(g.flat), dense.solve_flat(g.flat)
    oracle = conjugation_oracle(st, _l1_state(st, w, cfg, omega), w, cfg, omega)
    payload = {"omega": omega, "straightening": st.summary(), "reduction": state.summary(),
               "mu_inf": {str(k): v for k, v in state.mu_dict().items()},
               "melnikov": state.melnikov,
               "oracle": {"chain_vs_dense": float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)),
                          "chain_residual": chain.residual(g), "dense_residual": dense.residual(g), **oracle}}
    rows = [dict(n) for n in state.norms]
    return payload, {"reduce.csv": rows}


def _l1_state(st, w, cfg, omega):
    from .reduce import conjugate_to_L1
    return conjugate_to_L1(st, w, cfg, omega)


def run_solve(cfg, args, rng):
    from .nashmoser import nash_moser_solve
    omega = _omega(args, cfg, rng)
    run = nash_moser_solve(cfg, omega, inverse_method=args.inverse, max_iter=args.max_iter, tol=args.tol,
                           reversible=args.reversible or None)
    payload = run.summary()
    rows = [{"n": it.n, "residual": it.residual, "norm_s0": it.norm_s0, "N": it.N} for it in run.iterates]
    if run.outcome == "resonance_exit":
        raise GateExit(run.reason, payload, {"solve.csv": rows})
    return payload, {"solve.csv": rows}


def run_sweep(cfg, args, rng):
    from .nashmoser import theorem_sweep
    lams = args.lambdas or [1e2, 1e3, 1e4]
    rep = theorem_sweep(cfg, lams, omegas_per_lambda=args.per_lambda, seed=args.seed,
                        inverse_method=args.inverse, max_iter=args.max_iter)
    rows = [dict(r, slope=rep["slope"], stderr=rep["stderr"]) for r in rep["rows"]]
    return rep, {"sweep.csv": rows}


def run_measure(cfg, args, rng):
    from .diophantine import ResonancePredicate, fit_linear_bound, measure_fraction
    from .nashmoser import gate_attrition
    gammas = args.gammas or [1e-2, 1e-3]
    rows = []
    for g in gammas:
        pred = ResonancePredicate("DC", gamma=g, tau=cfg.tau, mode_range=cfg.K_trunc,
                                  momentum=cfg.momentum)
        est = measure_fraction(pred, args.samples, args.seed, cfg.nu)
        rows.append(est.row(g, cfg.lam))
    C = fit_linear_bound(gammas, [r["excluded_fraction"] for r in rows])
    lams = args.lambdas or [1e2, 1e3, 1e4]
    att = [gate_attrition(cfg.with_(lam=l), args.samples, args.seed) for l in lams]
    payload = {"dc": rows, "C_fit": C, "attrition": att,
               "attrition_decreasing": bool(att[-1]["fraction"] <= att[0]["fraction"])}
    return payload, {"measure.csv": rows, "attrition.csv": att}


def run_validate(cfg, args, rng):
    from .nashmoser import nash_moser_solve
    from .validate import stability_probe, validate_solution
    omega = _omega(args, cfg, rng)
    run = nash_moser_solve(cfg, omega, max_iter=args.max_iter)
    if run.outcome != "converged":
        raise GateExit(f"solve did not converge: {run.reason}", run.summary(), {})
    rep = validate_solution(run.w, cfg, omega)
    probe = stability_probe(run, cfg, omega, reversible=args.reversible or None)
    payload = {"omega": omega, "solve": {"residual": run.residual, "iterations": run.n_iter},
               "validation": rep.summary(), "stability": probe}
    return payload, {"validate.csv": rep.rows()}


RUNNERS = {"approx": run_approx, "reduce": run_reduce, "solve": run_solve, "sweep": run_sweep,
           "measure": run_measure, "validate": run_validate}


# argument handling ---------------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="betawave", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in RUNNERS:
        s = sub.add_parser(name)
        s.add_argument("config", nargs="?", help="TOML or JSON problem config")
        s.add_argument("--lambda", dest="lam", type=float)
        s.add_argument("--lambdas", type=_floats)
        s.add_argument("--omega", help="comma-separated frequency; default: seeded admissible draw")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", type=Path)
        s.add_argument("--inverse", choices=("dense_lu", "reduction_chain"), default="dense_lu")
        s.add_argument("--reversible", action="store_true")
        s.add_argument("--max-iter", type=int, default=10)
        s.add_argument("--tol", type=float)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field")
        if name == "sweep":
            s.add_argument("--per-lambda", type=int, default=3)
        if name == "measure":
            s.add_argument("--samples", type=int, default=10000)
            s.add_argument("--gammas", type=_floats)
        if name == "reduce":
            s.add_argument("--from-solution", action="store_true")
    c = sub.add_parser("compare")
    c.add_argument("a", type=Path)
    c.add_argument("b", type=Path)
    c.add_argument("--rtol", type=float, default=1e-12)
    c.add_argument("--tol", action="append", default=[], metavar="GLOB=RTOL")
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> ProblemConfig:
    base = ProblemConfig.load(args.config).to_dict() if args.config else ProblemConfig().to_dict()
    for item in args.set:
        key, _, val = item.partition("=")
        if not _:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        base[key.strip()] = _parse_value(val)
    if args.lam is not None:
        base["lam"] = args.lam
    return ProblemConfig.from_mapping(base)


def _compare(args) -> int:
    a = json.loads(args.a.read_text())
    b = json.loads(args.b.read_text())
    tol = {}
    for item in args.tol:
        pat, _, val = item.partition("=")
        tol[pat] = float(val)
    res = compare_reports(a, b, tol, args.rtol)
    print(json.dumps(to_jsonable(res), indent=2))
    return 0 if res["equal"] else 1


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.subcommand == "compare":
        try:
            return _compare(args)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    try:
        cfg = load_config(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 1
    out = args.out or (Path(args.config).parent if args.config else Path.cwd())
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    t0 = time.perf_counter()
    code = 0
    try:
        payload, tables = RUNNERS[args.subcommand](cfg, args, rng)
    except GateExit as exc:
        reason, payload, tables = exc.args
        payload = dict(payload, gate_exit=reason)
        code = 2
    except ResonanceError as exc:
        payload, tables = {"gate_exit": str(exc), "where": exc.where}, {}
        code = 2
    except (ConfigError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    report = make_report(args.subcommand, cfg, args.seed, payload,
                         {"wall_time": time.perf_counter() - t0})
    path = out / f"{args.subcommand}_report.json"
    path.write_text(json.dumps(report, indent=2))
    for name, rows in tables.items():
        write_csv(out / name, rows)
    if code == 2:
        print(f"gate exit: {payload['gate_exit']}", file=sys.stderr)
    print(str(path))
    return code


if __name__ == "__main__":
    sys.exit(main())
