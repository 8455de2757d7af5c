"""Command-line entry point: ``homdefect <command> --config experiment.json``.

Exit codes: 0 success, 2 configuration error, 3 solver divergence,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .assembly import (ConvergenceError, IndefiniteMatrixError, Problem, ResolutionError, SingularMatrixError,
                       export_matrix_market)
from .cell import InconsistentFluxError, flux_correctors, homogenize
from .coeffs import NonCoerciveError, coercivity_constant
from .corrector import Mollifier, build_approximate_solution, build_cutoff
from .mesh import MeshError, build_unit_cell_grid
from .solver import (NewtonConvergenceError, NonContractiveError, SingularJacobianError, frozen_newton_solve,
                     local_uniqueness_probe, sup_norm)
from .study import (_cell_size, defect_decay_study, fixed_field, homogenized_solution, rate_study, residual_decay_study,
                    write_json, write_rate_csv, write_table_csv)

log = logging.getLogger("homdefect")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_NUMERIC = 0, 2, 3, 4


def _out_dir(cfg, args) -> Path:
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _plot(cfg, path, eps, values, label, fit, slopes, title):
    if not cfg.plot:
        return
    from .plotting import loglog_plot

    loglog_plot(path, eps, values, label, fit, slopes, title)


def cmd_cell(cfg, args) -> int:
    out = _out_dir(cfg, args)
    m = 64 if cfg.cell_m == "matched" else int(cfg.cell_m)
    grid = build_unit_cell_grid(cfg.dim, m)
    c0 = coercivity_constant(cfg.a, cfg.sample_density)
    corr, ahat = homogenize(grid, cfg.a)
    corr.to_csv(out / "correctors.csv")
    payload = ahat.to_dict()
    payload.update({"cell_m": m, "coefficient": cfg.a.descriptor, "coercivity_a": c0,
                    "corrector_max": float(np.abs(corr.values).max())})
    try:
        flux = flux_correctors(grid, cfg.a, corr, ahat)
        payload["flux"] = {"antisymmetry_defect": flux.antisymmetry_defect(),
                           "weak_identity_residual": flux.weak_identity_residual()}
    except InconsistentFluxError as exc:
        payload["flux"] = {"error": str(exc)}
    write_json(out / "ahat.json", payload)
    print(f"cell m={m}: ahat = {np.array2string(ahat.matrix(), precision=8)}")
    print(f"coercivity(a) = {c0:.6g}, coercivity(ahat) = {ahat.coercivity:.6g}")
    return EXIT_OK


def _single_eps(cfg) -> float:
    if cfg.eps is not None:
        return float(cfg.eps)
    if cfg.ladder:
        return float(cfg.ladder[-1])
    raise cfgmod.ConfigError("eps: required for this command (or give a ladder)")


def _prepare(cfg, eps: float):
    spec = cfg.spec()
    mesh = spec.mesh()
    hom = homogenized_solution(spec, mesh, _cell_size(spec, mesh, eps))
    mol = Mollifier(cfg.dim) if cfg.variant == "smoothed-2D" else None
    cutoff = build_cutoff(mesh, eps)
    approx = build_approximate_solution(cfg.variant, hom.u0, hom.correctors, eps, mesh, cutoff, mol,
                                        cfg.resolution_floor, cfg.allow_underresolved)
    problem = Problem(mesh, cfg.a, eps, cfg.b, cfg.nl, hom.load, cfg.resolution_floor, cfg.allow_underresolved)
    return mesh, hom, approx, problem


def _write_solution(path, mesh, u0, ubar, ueps) -> None:
    n = u0.shape[1]
    cols = [f"x{k}" for k in range(mesh.dim)]
    for name in ("u0", "ubar", "ueps"):
        cols += [f"{name}_{a}" for a in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(mesh.n_nodes):
            row = [f"{v:.10g}" for v in mesh.points[i]]
            row += [f"{v:.12e}" for v in (*u0[i], *ubar[i], *ueps[i])]
            w.writerow(row)


def cmd_solve(cfg, args) -> int:
    out = _out_dir(cfg, args)
    eps = _single_eps(cfg)
    mesh, hom, approx, problem = _prepare(cfg, eps)
    if cfg.export_matrix:
        export_matrix_market(problem.jacobian(approx.values), out / "jacobian.mtx",
                             f"Jacobian at the approximate solution, eps={eps:g}")
    try:
        rep = frozen_newton_solve(problem, approx.values, cfg.solver)
    except NonContractiveError as exc:
        if exc.report is not None:
            write_json(out / "report.json", {**exc.report.to_dict(), "status": "non-contractive"})
        raise
    payload = rep.to_dict()
    payload.update({"status": "converged", "variant": cfg.variant, "ahat": hom.ahat.matrix().tolist(),
                    "err_sup": sup_norm(rep.values - hom.u0), "ubar_diff": approx.sup_difference,
                    "mesh": mesh.summary()})
    write_json(out / "report.json", payload)
    _write_solution(out / "solution.csv", mesh, hom.u0, approx.values, rep.values)
    print(f"eps={eps:g}: converged in {rep.iterations} iterations, q_max={rep.q_max:.4g}, "
          f"|u_eps-u0|_inf={payload['err_sup']:.4e}")
    return EXIT_OK


def cmd_rate(cfg, args) -> int:
    out = _out_dir(cfg, args)
    if not cfg.ladder:
        raise cfgmod.ConfigError("ladder: required for rate studies")
    res = rate_study(cfg.spec(), cfg.ladder, cfg.variant, threads=args.threads)
    write_rate_csv(res, out / "rate.csv")
    write_json(out / "rate.json", res.to_dict())
    errs = [p.err_sup for p in res.points]
    _plot(cfg, out / "rate.svg", [p.eps for p in res.points], errs, "|u_eps - u0|_inf", res.fit,
          (0.5, 1.0), f"rate study ({res.variant})")
    for p in res.points:
        print(f"eps={p.eps:<10.6g} err={p.err_sup:.4e} resid={p.resid_dual:.4e} q_max={p.q_max:.3g} iters={p.iters}")
    lam = "n/a" if res.lambda_hat is None else f"{res.lambda_hat:.4f} (R2={res.fit.r2:.4f})"
    print(f"status={res.status} lambda_hat={lam}")
    return EXIT_OK


def cmd_defect(cfg, args) -> int:
    out = _out_dir(cfg, args)
    if not cfg.ladder:
        raise cfgmod.ConfigError("ladder: required for defect studies")
    mesh = cfg.spec().mesh()
    res = defect_decay_study(mesh, cfg.b, fixed_field(mesh, cfg.field_kind, cfg.field_exponent, cfg.n), cfg.ladder)
    slope = "" if res.fit is None else f"slope={res.fit.slope:.6f}"
    write_table_csv(out / "defect.csv", ["eps", "dual_norm"], [[e, v] for e, v in zip(res.eps, res.dual_norm)],
                    ["summary", slope])
    write_json(out / "defect.json", {**res.to_dict(), "field": cfg.field_kind})
    _plot(cfg, out / "defect.svg", res.eps, res.dual_norm, "|B_eps u|_*", res.fit, (cfg.dim / 2,),
          f"defect decay ({cfg.field_kind} field)")
    print(f"defect decay: {slope or 'no fit (zero norms)'}")
    return EXIT_OK


def cmd_residual(cfg, args) -> int:
    out = _out_dir(cfg, args)
    if not cfg.ladder:
        raise cfgmod.ConfigError("ladder: required for residual studies")
    res = residual_decay_study(cfg.spec(), cfg.ladder, cfg.variant)
    slope = "" if res.fit is None else f"slope={res.fit.slope:.6f}"
    write_table_csv(out / "residual.csv", ["eps", "resid_dual", "ubar_diff"],
                    [[e, r, u] for e, r, u in zip(res.eps, res.resid_dual, res.ubar_diff)],
                    ["summary", slope, f"monotone={res.monotone}"])
    write_json(out / "residual.json", res.to_dict())
    _plot(cfg, out / "residual.svg", res.eps, res.resid_dual, "|F_eps(ubar)|_*", res.fit, (0.5,),
          f"approximate-solution residual ({res.variant})")
    print(f"residual decay ({res.variant}): {slope or 'no fit'} monotone={res.monotone}")
    return EXIT_OK


def cmd_probe(cfg, args) -> int:
    out = _out_dir(cfg, args)
    eps = _single_eps(cfg)
    mesh, hom, approx, problem = _prepare(cfg, eps)
    rep = frozen_newton_solve(problem, approx.values, cfg.solver, estimate=False)
    probe = local_uniqueness_probe(problem, approx.values, rep.values, cfg.probe_delta, cfg.probe_trials,
                                   cfg.seed, cfg.solver)
    write_json(out / "probe.json", {**probe.to_dict(), "eps": eps, "seed": cfg.seed})
    print(f"probe: delta={probe.delta:g} trials={probe.trials} spread={probe.spread:.3e} diverged={probe.diverged}")
    return EXIT_OK


COMMANDS = {"cell": cmd_cell, "solve": cmd_solve, "rate": cmd_rate, "defect": cmd_defect,
            "residual": cmd_residual, "probe": cmd_probe}


HELP = {
    "cell": "solve the cell problems, write correctors.csv and ahat.json",
    "solve": "frozen-Jacobian solve at one eps, write solution.csv and report.json",
    "rate": "convergence-rate study over the eps ladder",
    "defect": "decay of the defect operator applied to a fixed field",
    "residual": "residual of the approximate solution over the eps ladder",
    "probe": "restart the frozen iteration from random perturbations",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homdefect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="parallel ladder points (default 1)")
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise cfgmod.ConfigError("seed must be nonnegative")
            cfg.seed = args.seed
        if args.threads < 1:
            raise cfgmod.ConfigError("--threads must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonContractiveError, NewtonConvergenceError) as exc:
        print(f"non-contractive: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (NonCoerciveError, SingularJacobianError, SingularMatrixError, IndefiniteMatrixError,
            ConvergenceError, ResolutionError, MeshError, FloatingPointError, ValueError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
