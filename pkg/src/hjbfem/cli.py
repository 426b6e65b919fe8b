"""Benchmark driver: runs adaptive or uniform studies of the built-in
problems and writes CSV records.

Configuration is a flat JSON file; every field can be overridden by a
command-line flag of the same name.  CSV columns are fixed:
step,ndofs,error_T,eta,effectivity,newton_iters,h_max.
"""

import argparse
import json
import sys

import numpy as np

from .adapt import AdaptiveRecord, adaptive_loop
from .benchmarks import check_exact_derivatives, make_problem
from .estimate import error_norm, estimate_eta, export_eta_csv
from .fespace import FESpace, element_geometry
from .forms import MethodParams, stability_parameters
from .mesh import mesh_sizes, uniform_refine, write_mesh
from .problem import verify_cordes
from .solver import SolverConfig, SolverError, solve_isaacs

DEFAULTS = {
    "experiment": "pentagon",
    "s": 1,
    "p": 2,
    "theta": 0.5,
    "chi": 0,
    "sigma": None,      # None: 10 p^2
    "rho": None,        # None: 10 p^4
    "lam": 0.0,
    "n_alpha": 16,
    "n_beta": 32,
    "phi": np.pi / 10,
    "alpha_max": 9 * np.pi / 40,
    "bulk": 0.25,
    "max_dofs": 50000,
    "uniform_steps": 5,
    "refinement": None,  # None: adaptive for pentagon, uniform for squares
    "tol": 1e-10,
    "max_outer": 50,
    "max_inner": 30,
    "out": "results.csv",
    "export_mesh": None,
    "export_eta": None,
}

CSV_HEADER = "step,ndofs,error_T,eta,effectivity,newton_iters,h_max"


def _record_line(r):
    return "%d,%d,%.12e,%.12e,%.12e,%d,%.12e" % (
        r.step, r.ndofs, r.error, r.eta, r.effectivity, r.newton_iters, r.h_max)


def write_records(path, records):
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(_record_line(r) + "\n")


def _build(config):
    name = config["experiment"]
    kwargs = {}
    if name in ("pentagon", "pentagon-isaacs"):
        kwargs = {"phi": config["phi"], "alpha_max": config["alpha_max"],
                  "n_alpha": config["n_alpha"], "n_beta": config["n_beta"]}
    problem, grid, exact, mesh = make_problem(name, **kwargs)
    params = MethodParams(s=config["s"], p=config["p"], theta=config["theta"],
                          chi=config["chi"], sigma=config["sigma"],
                          rho=config["rho"], lam=config["lam"])
    solver = SolverConfig(tol=config["tol"], max_outer=config["max_outer"],
                          max_inner=config["max_inner"])
    return problem, grid, exact, mesh, params, solver


def uniform_study(problem, grid, exact, params, config_solver, mesh, steps):
    """Solve on a fixed family of uniformly refined meshes."""
    records = []
    for step in range(steps):
        space = FESpace(mesh, params.s, params.p)
        u, trace = solve_isaacs(problem, grid, params, config_solver, space)
        eta_K = estimate_eta(u, problem, grid)
        err, _ = error_norm(exact, u, lam=params.lam)
        eta = float(np.sqrt(np.sum(eta_K ** 2)))
        records.append(AdaptiveRecord(step, space.ndofs, err, eta,
                                      eta / err if err > 0 else np.inf,
                                      trace.solves,
                                      float(mesh_sizes(mesh).h_elem.max())))
        if step < steps - 1:
            mesh = uniform_refine(mesh)
    return records, mesh, u


def run(config):
    """Execute one experiment; returns records and writes the CSV."""
    cfg = dict(DEFAULTS)
    cfg.update({k: v for k, v in config.items() if v is not None})
    problem, grid, exact, mesh, params, solver = _build(cfg)

    # closed-form derivative self-check away from the singular radii
    rng = np.random.default_rng(0)
    r = rng.uniform(0.1, 0.42, size=64)
    th = rng.uniform(0.2, 1.2, size=64)
    check_exact_derivatives(exact, np.stack([r * np.cos(th), r * np.sin(th)], axis=1))

    # Cordes constant on the initial-mesh quadrature points, and the
    # geometry-robust stabilization window it implies
    p0, A, _, _ = element_geometry(mesh)
    centroids = p0 + A.sum(axis=2) / 3.0
    cordes = verify_cordes(problem, centroids, grid)
    if not cordes.satisfied:
        raise ValueError("problem violates the Cordes condition (nu = %.3e)"
                         % cordes.nu)
    lo, hi, mu = stability_parameters(cordes.nu, cfg["theta"])
    print("cordes nu %.6f; robust theta window (%.5f, %.5f); "
          "mu(theta=%g) = %.5f" % (cordes.nu, lo, hi, cfg["theta"], mu))

    refinement = cfg["refinement"]
    if refinement is None:
        refinement = "adaptive" if cfg["experiment"].startswith("pentagon") \
            else "uniform"
    final_mesh, final_u = None, None
    try:
        if refinement == "uniform":
            records, final_mesh, final_u = uniform_study(
                problem, grid, exact, params, solver, mesh,
                cfg["uniform_steps"])
        else:
            holder = {}

            def keep(rec, u, trace):
                holder["u"] = u

            records = adaptive_loop(problem, grid, exact, params, solver,
                                    mesh, cfg["max_dofs"], bulk=cfg["bulk"],
                                    on_step=keep)
            final_u = holder.get("u")
            final_mesh = final_u.space.mesh if final_u is not None else mesh
    except SolverError as exc:
        write_records(cfg["out"], getattr(exc, "records", []))
        raise
    write_records(cfg["out"], records)
    if cfg["export_mesh"] and final_mesh is not None:
        write_mesh(final_mesh, cfg["export_mesh"])
    if cfg["export_eta"] and final_u is not None:
        eta_K = estimate_eta(final_u, problem, grid)
        _, err_K = error_norm(exact, final_u, lam=params.lam)
        export_eta_csv(cfg["export_eta"], eta_K, err_K)
    return records


def build_parser():
    par = argparse.ArgumentParser(
        prog="hjbfem",
        description="Adaptive DG / C0-IP benchmark driver for HJB and "
                    "Isaacs equations with Cordes coefficients")
    par.add_argument("--config", help="flat JSON config file")
    par.add_argument("--experiment", choices=["pentagon", "pentagon-isaacs",
                                              "square-laplace",
                                              "square-smooth-hjb"])
    par.add_argument("--s", type=int, choices=[0, 1])
    par.add_argument("--p", type=int)
    par.add_argument("--theta", type=float)
    par.add_argument("--chi", type=int, choices=[0, 1])
    par.add_argument("--sigma", type=float)
    par.add_argument("--rho", type=float)
    par.add_argument("--lam", type=float)
    par.add_argument("--n-alpha", dest="n_alpha", type=int)
    par.add_argument("--n-beta", dest="n_beta", type=int)
    par.add_argument("--phi", type=float)
    par.add_argument("--alpha-max", dest="alpha_max", type=float)
    par.add_argument("--bulk", type=float)
    par.add_argument("--max-dofs", dest="max_dofs", type=int)
    par.add_argument("--uniform-steps", dest="uniform_steps", type=int)
    par.add_argument("--refinement", choices=["adaptive", "uniform"])
    par.add_argument("--tol", type=float)
    par.add_argument("--max-outer", dest="max_outer", type=int)
    par.add_argument("--max-inner", dest="max_inner", type=int)
    par.add_argument("--out")
    par.add_argument("--export-mesh", dest="export_mesh")
    par.add_argument("--export-eta", dest="export_eta")
    return par


def main(argv=None):
    args = build_parser().parse_args(argv)
    config = {}
    if args.config:
        with open(args.config) as fh:
            config.update(json.load(fh))
    for key, value in vars(args).items():
        if key != "config" and value is not None:
            config[key] = value
    try:
        records = run(config)
    except SolverError as exc:
        print("solver failure: %s (partial results written)" % exc,
              file=sys.stderr)
        return 1
    for r in records:
        print(_record_line(r))
    return 0


if __name__ == "__main__":
    sys.exit(main())
