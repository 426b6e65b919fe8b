"""Bulk-chasing marking and the solve-estimate-mark-refine loop."""

from dataclasses import dataclass

import numpy as np

from .estimate import error_norm, estimate_eta
from .fespace import FESpace, transfer
from .mesh import mesh_sizes, refine
from .solver import SolverError, solve_isaacs


@dataclass
class AdaptiveRecord:
    step: int
    ndofs: int
    error: float
    eta: float
    effectivity: float
    newton_iters: int
    h_max: float


def dorfler_mark(eta_sq, bulk):
    """Smallest prefix of elements (sorted by decreasing eta_K^2, ties by
    element index) whose combined share reaches bulk * total.

    All-zero input returns the empty set, signalling convergence.
    """
    eta_sq = np.asarray(eta_sq, dtype=float)
    if np.any(eta_sq < 0):
        raise ValueError("estimator squares must be nonnegative")
    if not 0.0 < bulk <= 1.0:
        raise ValueError("bulk parameter must lie in (0, 1]")
    total = eta_sq.sum()
    if total <= 0.0:
        return np.array([], dtype=np.int64)
    order = np.argsort(-eta_sq, kind="stable")
    csum = np.cumsum(eta_sq[order])
    count = int(np.searchsorted(csum, bulk * total - 1e-14 * total) + 1)
    if bulk >= 1.0:
        count = int(np.count_nonzero(eta_sq))
    return np.sort(order[:count])


def adaptive_loop(problem, grid, exact, params, config, mesh, max_dofs,
                  bulk=0.25, on_step=None, keep_iterates=False):
    """Adaptive refinement driven by the residual estimators.

    Solves, estimates, records, marks (bulk-chasing) and refines until the
    dof count reaches ``max_dofs``.  Each step warm-starts from the exactly
    transferred previous solution.  A solver failure aborts with the partial
    records attached to the exception.
    """
    records = []
    iterates = []
    u_prev = None
    step = 0
    while True:
        space = FESpace(mesh, params.s, params.p)
        initial = transfer(u_prev, space) if u_prev is not None else None
        try:
            u, trace = solve_isaacs(problem, grid, params, config, space,
                                    initial=initial)
        except SolverError as exc:
            exc.records = records
            raise
        eta_K = estimate_eta(u, problem, grid)
        err, err_K = error_norm(exact, u, lam=params.lam)
        eta = float(np.sqrt(np.sum(eta_K ** 2)))
        rec = AdaptiveRecord(step, space.ndofs, err, eta,
                             eta / err if err > 0 else np.inf,
                             trace.solves, float(mesh_sizes(mesh).h_elem.max()))
        records.append(rec)
        if keep_iterates:
            iterates.append((u, trace))
        if on_step is not None:
            on_step(rec, u, trace)
        if space.ndofs >= max_dofs:
            break
        marked = dorfler_mark(eta_K ** 2, bulk)
        if marked.size == 0:
            break
        mesh = refine(mesh, marked)
        if u_prev is not None:
            u_prev.space._cache.clear()  # tables are never needed again
        u_prev = u
        step += 1
    if keep_iterates:
        return records, iterates
    return records
