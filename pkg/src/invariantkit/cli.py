"""Command-line surface: parse problem files and run the pipelines.

Subcommands:

    simulate     brute-force point classification on a state grid
    value-iter   grid value iteration; field, contour and convergence CSVs
    sos          certificate synthesis via the SDP pipeline
    verify       re-audit a saved certificate against the system
    export-sdpa  compile the SOS program and dump SDPA sparse text

Problems are JSON documents (see PROBLEM_SCHEMA); polynomials are lists
of {"exponents": [...], "coefficient": c} records so no expression
parsing is needed.  Every run writes a manifest recording the input
hash, all parameters and seeds, and the hashes of the produced files.
Outputs are deterministic for fixed inputs and seeds; on failure any
partially written file is removed and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys as _sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .polynomials import Polynomial
from .sdpa import export_sdpa
from .simulate import PerturbationGrid, estimate_invariant_grid
from .systems import Region, SwitchedSystem, validate_system
from . import sos as _sos
from . import valueiter as _vi

_POLY = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "additionalProperties": False,
        "required": ["exponents", "coefficient"],
        "properties": {
            "exponents": {
                "type": "array",
                "items": {"type": "integer", "minimum": 0},
            },
            "coefficient": {"type": "number"},
        },
    },
}

_INTERVAL = {
    "type": "array",
    "minItems": 2,
    "maxItems": 2,
    "items": {"type": "number"},
}

PROBLEM_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": [
        "name",
        "state_dim",
        "pert_dim",
        "x0_constraints",
        "regions",
        "dynamics",
        "pert_constraints",
        "pert_box",
        "state_box",
    ],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "state_dim": {"type": "integer", "minimum": 1},
        "pert_dim": {"type": "integer", "minimum": 0},
        "variables": {"type": "array", "items": {"type": "string"}},
        "pert_variables": {"type": "array", "items": {"type": "string"}},
        "x0_constraints": {"type": "array", "minItems": 1, "items": _POLY},
        "regions": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["constraints"],
                "properties": {
                    "constraints": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["polynomial", "comparison"],
                            "properties": {
                                "polynomial": _POLY,
                                "comparison": {"enum": ["<=", "<"]},
                            },
                        },
                    }
                },
            },
        },
        "dynamics": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "minItems": 1, "items": _POLY},
        },
        "pert_constraints": {"type": "array", "items": _POLY},
        "pert_box": {"type": "array", "items": _INTERVAL},
        "state_box": {"type": "array", "minItems": 1, "items": _INTERVAL},
        "defaults": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number"},
                "vi_alpha": {"type": "number"},
                "epsilon": {"type": "number"},
                "du": {"type": "integer", "minimum": 0},
                "ds": {"type": "integer", "minimum": 0},
                "dsp": {"type": "integer", "minimum": 0},
                "grid": {"type": "array", "items": {"type": "integer", "minimum": 2}},
                "pert_grid": {"type": "integer", "minimum": 1},
                "horizon": {"type": "integer", "minimum": 1},
            },
        },
    },
}


class ProblemError(ValueError):
    """Problem-document rejection; message carries a JSON pointer."""


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path)


def _poly(num_vars: int, data, where: str) -> Polynomial:
    p = Polynomial.from_json(num_vars, data)
    for exps in p.terms:
        if len(exps) != num_vars:
            raise ProblemError(
                f"{where}: exponent tuple has {len(exps)} entries, "
                f"expected {num_vars}"
            )
    return p


def parse_problem(path) -> tuple[SwitchedSystem, dict]:
    """Load, schema-check and deserialize a problem document.

    Returns the system together with its defaults block (possibly empty).
    Raises ProblemError on schema violations, naming the offending field
    by JSON pointer.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemError(f"not valid JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(PROBLEM_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ProblemError(f"schema error at {_pointer(e.absolute_path)}: {e.message}")

    n, m = doc["state_dim"], doc["pert_dim"]
    if len(doc["state_box"]) != n:
        raise ProblemError(f"schema error at /state_box: expected {n} intervals")
    if len(doc["pert_box"]) != m:
        raise ProblemError(f"schema error at /pert_box: expected {m} intervals")
    if len(doc["dynamics"]) != len(doc["regions"]):
        raise ProblemError(
            "schema error at /dynamics: expected one map per region "
            f"({len(doc['regions'])}), got {len(doc['dynamics'])}"
        )
    x0 = tuple(
        _poly(n, p, f"/x0_constraints/{i}") for i, p in enumerate(doc["x0_constraints"])
    )
    regions = tuple(
        Region(
            tuple(
                (
                    _poly(n, c["polynomial"], f"/regions/{i}/constraints/{j}"),
                    c["comparison"],
                )
                for j, c in enumerate(r["constraints"])
            )
        )
        for i, r in enumerate(doc["regions"])
    )
    dynamics = tuple(
        tuple(
            _poly(n + m, f, f"/dynamics/{i}/{j}") for j, f in enumerate(maps)
        )
        for i, maps in enumerate(doc["dynamics"])
    )
    pert = tuple(
        _poly(m, p, f"/pert_constraints/{i}")
        for i, p in enumerate(doc["pert_constraints"])
    )
    try:
        system = SwitchedSystem(
            state_dim=n,
            pert_dim=m,
            x0_constraints=x0,
            regions=regions,
            dynamics=dynamics,
            pert_constraints=pert,
            pert_box=np.array(doc["pert_box"], dtype=float).reshape(m, 2),
            name=doc["name"],
        )
    except ValueError as exc:
        raise ProblemError(str(exc)) from exc
    defaults = dict(doc.get("defaults", {}))
    defaults["state_box"] = np.array(doc["state_box"], dtype=float)
    return system, defaults


def serialize_problem(system: SwitchedSystem, state_box, defaults=None) -> str:
    """Canonical JSON form of a system; parse(serialize(s)) reproduces s."""
    doc = {
        "name": system.name,
        "state_dim": system.state_dim,
        "pert_dim": system.pert_dim,
        "x0_constraints": [h.to_json() for h in system.x0_constraints],
        "regions": [
            {
                "constraints": [
                    {"polynomial": h.to_json(), "comparison": cmp}
                    for h, cmp in r.constraints
                ]
            }
            for r in system.regions
        ],
        "dynamics": [[f.to_json() for f in maps] for maps in system.dynamics],
        "pert_constraints": [h.to_json() for h in system.pert_constraints],
        "pert_box": np.asarray(system.pert_box, dtype=float).tolist(),
        "state_box": np.asarray(state_box, dtype=float).tolist(),
    }
    if defaults:
        doc["defaults"] = dict(defaults)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def bundled_problem_path(name: str) -> Path:
    """Filesystem path of a problem document shipped with the package."""
    return Path(resources.files("invariantkit") / "problems" / f"{name}.json")


def _parse_grid(text: str, dim: int) -> np.ndarray:
    """Accept '100', '100x100' or '20^7' node-count spellings."""
    text = text.strip().lower()
    if "^" in text:
        base, _, power = text.partition("^")
        counts = [int(base)] * int(power)
    elif "x" in text:
        counts = [int(t) for t in text.split("x")]
    else:
        counts = [int(text)] * dim
    if len(counts) != dim:
        raise ValueError(f"grid spec {text!r} gives {len(counts)} axes, need {dim}")
    return np.array(counts, dtype=np.int64)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


_ACTIVE_RUNS: list["_Run"] = []


class _Run:
    """Tracks output files for a single command so failures clean up."""

    def __init__(self, args, out_dir: Path):
        self.args = args
        self.out_dir = out_dir
        self.files: list[Path] = []
        self.t0 = time.monotonic()
        _ACTIVE_RUNS.append(self)

    def path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / name
        self.files.append(p)
        return p

    def write(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def cleanup(self):
        for p in self.files:
            p.unlink(missing_ok=True)

    def manifest(self, command: str, parameters: dict, seeds: dict) -> Path:
        doc = {
            "command": command,
            "version": __version__,
            "problem": {
                "path": str(self.args.problem),
                "sha256": _sha256(Path(self.args.problem)),
            },
            "parameters": parameters,
            "seeds": seeds,
            "outputs": {p.name: _sha256(p) for p in self.files},
            "wall_time_s": round(time.monotonic() - self.t0, 3),
        }
        p = self.path(f"{Path(self.args.problem).stem}_{command}_manifest.json")
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p


def _fmt(x: float) -> str:
    return repr(float(x))


def _load(args):
    system, defaults = parse_problem(args.problem)
    report = validate_system(system, defaults["state_box"], samples=10_000, seed=0)
    print(
        f"partition audit: {report.samples} samples, "
        f"{report.uncovered} uncovered, {report.overlapping} overlapping, "
        f"{report.x0_hits} in X0"
    )
    if not report.ok:
        print("warning: sampled states matched by != 1 region", file=_sys.stderr)
    return system, defaults


def _coord_header(dim: int) -> str:
    return ",".join(f"x{i + 1}" for i in range(dim))


def cmd_simulate(args) -> int:
    system, defaults = _load(args)
    run = _Run(args, Path(args.out_dir))
    box = defaults["state_box"]
    res = _parse_grid(args.grid, system.state_dim)
    grid = _vi.build_grid(box, res)
    pgrid = PerturbationGrid.uniform(system, args.pert_grid)
    points = grid.nodes()
    mask = estimate_invariant_grid(system, points, pgrid, args.horizon)
    lines = [_coord_header(system.state_dim) + ",invariant"]
    for p, v in zip(points, mask):
        lines.append(",".join(_fmt(c) for c in p) + f",{int(v)}")
    stem = Path(args.problem).stem
    run.write(f"{stem}_mask.csv", "\n".join(lines) + "\n")
    run.manifest(
        "simulate",
        {
            "grid": res.tolist(),
            "state_box": box.tolist(),
            "pert_grid": args.pert_grid,
            "horizon": args.horizon,
        },
        {},
    )
    print(f"classified {points.shape[0]} nodes, {int(mask.sum())} candidate-invariant")
    return 0


def cmd_value_iter(args) -> int:
    system, defaults = _load(args)
    run = _Run(args, Path(args.out_dir))
    box = defaults["state_box"]
    res = _parse_grid(args.grid, system.state_dim)
    grid = _vi.build_grid(box, res)  # may refuse on the node budget
    pgrid = PerturbationGrid.uniform(system, args.pert_grid)
    cfg = _vi.ViConfig(
        alpha=args.alpha, epsilon=args.eps, pgrid=pgrid, max_iters=args.max_iters
    )
    result = _vi.solve_value_iteration(system, grid, cfg)
    stem = Path(args.problem).stem

    nodes = grid.nodes()
    lines = [_coord_header(system.state_dim) + ",value"]
    for p, v in zip(nodes, result.field.values.ravel()):
        lines.append(",".join(_fmt(c) for c in p) + "," + _fmt(v))
    run.write(f"{stem}_field.csv", "\n".join(lines) + "\n")

    lines = ["iteration,delta"]
    for i, d in enumerate(result.deltas, start=1):
        lines.append(f"{i},{_fmt(d)}")
    run.write(f"{stem}_convergence.csv", "\n".join(lines) + "\n")

    zero = _vi.extract_zero_set(result.field, args.tol)
    lines = ["contour,x1,x2"]
    for ci, poly in enumerate(zero.contours):
        for x, y in poly:
            lines.append(f"{ci},{_fmt(x)},{_fmt(y)}")
    run.write(f"{stem}_contours.csv", "\n".join(lines) + "\n")

    run.manifest(
        "value-iter",
        {
            "alpha": args.alpha,
            "epsilon": args.eps,
            "grid": res.tolist(),
            "state_box": box.tolist(),
            "pert_grid": args.pert_grid,
            "max_iters": args.max_iters,
            "zero_tol": args.tol,
        },
        {},
    )
    status = "converged" if result.converged else "NOT converged"
    print(
        f"{status} after {result.iterations} sweeps, "
        f"final delta {result.final_delta:.3e}, "
        f"{int(zero.mask.sum())} zero-set nodes"
    )
    return 0 if result.converged else 1


def _build_program(system, defaults, args):
    box = defaults["state_box"]
    du = args.du if args.du is not None else defaults.get("du", 4)
    ds = args.ds if args.ds is not None else defaults.get("ds", du)
    dsp = args.dsp if args.dsp is not None else defaults.get("dsp", du)
    alpha = args.alpha if args.alpha is not None else defaults.get("alpha", 1.0)
    return _sos.build_sos_program(system, alpha, du, ds, dsp, box), {
        "alpha": alpha,
        "du": du,
        "ds": ds,
        "dsp": dsp,
        "state_box": box.tolist(),
    }


def cmd_sos(args) -> int:
    system, defaults = _load(args)
    run = _Run(args, Path(args.out_dir))
    program, params = _build_program(system, defaults, args)
    problem = _sos.compile_to_sdp(program)
    print(
        f"compiled: {problem.form.m} constraints, "
        f"blocks {[s for s in problem.form.block_sizes]}"
    )
    solution, problem = _sos.solve_with_reduction(problem, backend=args.backend)
    print(
        f"solve: {solution.status}, objective {solution.primal_objective:.6f}, "
        f"gap {solution.gap:.2e}, {solution.iterations} iterations"
    )
    if solution.status != "optimal":
        print(f"solver did not reach optimality: {solution.message}", file=_sys.stderr)
        run.cleanup()
        return 1
    cert = _sos.recover_certificate(problem, solution)
    # large compilations are finished by the first-order backend at its
    # looser tolerance; audit against the identity defect it can deliver
    margin_tol = (
        1e-4
        if problem.form.m > _sos.REDUCTION_MAX_ROWS
        else _sos.VERIFY_MARGIN_TOL
    )
    report = _sos.verify_certificate(
        system, cert, samples=args.samples, seed=args.seed, margin_tol=margin_tol
    )
    cert = _sos.Certificate(
        u=cert.u,
        multipliers=cert.multipliers,
        alpha=cert.alpha,
        R=cert.R,
        report=report,
    )
    stem = Path(args.problem).stem
    run.write(f"{stem}_certificate.json", _sos.certificate_to_json(cert))
    run.manifest(
        "sos",
        {**params, "backend": args.backend, "samples": args.samples},
        {"verify": args.seed},
    )
    print(
        f"verification: passed={report.passed}, set_samples={report.set_samples}, "
        f"dynamic_margin={report.dynamic_margin:.2e}, "
        f"state_margin={report.state_margin:.2e}, "
        f"closure_margin={report.closure_margin:.2e}"
    )
    if not report.passed:
        run.cleanup()
        return 1
    return 0


def cmd_verify(args) -> int:
    system, _ = _load(args)
    cert = _sos.certificate_from_json(Path(args.certificate).read_text())
    report = _sos.verify_certificate(
        system, cert, samples=args.samples, seed=args.seed
    )
    print(
        f"passed={report.passed}, set_samples={report.set_samples}, "
        f"min_u={report.min_u:.3e}, dynamic_margin={report.dynamic_margin:.2e}, "
        f"state_margin={report.state_margin:.2e}, "
        f"closure_margin={report.closure_margin:.2e}, "
        f"containment_failures={report.containment_failures}"
    )
    return 0 if report.passed else 1


def cmd_export_sdpa(args) -> int:
    system, defaults = _load(args)
    run = _Run(args, Path(args.out_dir))
    program, params = _build_program(system, defaults, args)
    problem = _sos.compile_to_sdp(program)
    stem = Path(args.problem).stem
    run.write(f"{stem}.dat-s", export_sdpa(problem.form))
    run.manifest("export-sdpa", params, {})
    print(
        f"exported {problem.form.m} constraints, "
        f"blocks {[s for s in problem.form.block_sizes]}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invariantkit",
        description="Robust invariant sets for switched polynomial systems.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("problem", help="problem JSON document")
        p.add_argument("-o", "--out-dir", default=".", help="output directory")

    p = sub.add_parser("simulate", help="brute-force grid classification")
    common(p)
    p.add_argument("--grid", default="50x50", help="nodes per axis, e.g. 50x50")
    p.add_argument("--pert-grid", type=int, default=10)
    p.add_argument("--horizon", type=int, default=50)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("value-iter", help="grid value iteration")
    common(p)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--eps", type=float, default=1e-20)
    p.add_argument("--grid", default="100x100", help="e.g. 100x100 or 20^7")
    p.add_argument("--pert-grid", type=int, default=10)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-9, help="zero-set level")
    p.set_defaults(func=cmd_value_iter)

    p = sub.add_parser("sos", help="certificate synthesis via SDP")
    common(p)
    p.add_argument("--du", type=int, default=None)
    p.add_argument("--ds", type=int, default=None)
    p.add_argument("--dsp", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--backend", choices=["auto", "embedded", "scs"], default="auto")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sos)

    p = sub.add_parser("verify", help="re-audit a saved certificate")
    common(p)
    p.add_argument("--certificate", required=True)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-sdpa", help="dump the compiled SDP as .dat-s")
    common(p)
    p.add_argument("--du", type=int, default=None)
    p.add_argument("--ds", type=int, default=None)
    p.add_argument("--dsp", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_export_sdpa)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _ACTIVE_RUNS.clear()
    try:
        return args.func(args)
    except (ProblemError, FileNotFoundError) as exc:
        for run in _ACTIVE_RUNS:
            run.cleanup()
        print(f"error: {exc}", file=_sys.stderr)
        return 2
    except (ValueError, _vi.GridBudgetError) as exc:
        for run in _ACTIVE_RUNS:
            run.cleanup()
        print(f"error: {exc}", file=_sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
