"""Howard-type outer iteration over the minimizing player with semismooth
Newton (policy iteration) inner solves of the maximizing-player subproblem,
on top of a sparse direct factorization.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .forms import assemble_linearized, select_controls


@dataclass
class SolverConfig:
    tol: float = 1e-10          # residual norm over rhs norm at termination
    max_outer: int = 50
    max_inner: int = 30
    linear_solver: str = "direct"

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.linear_solver != "direct":
            raise ValueError("only the direct sparse solver is available")


class SolveTrace:
    """Per-iteration residual history.

    Each row is (outer index, inner index, scaled residual, number of
    quadrature points whose control selection changed).  ``solves`` counts
    linear solves, i.e. inner Newton iterations.
    """

    def __init__(self):
        self.rows = []
        self.solves = 0

    def append(self, outer, inner, residual, policy_changes):
        self.rows.append((outer, inner, float(residual), int(policy_changes)))

    def residuals(self):
        return np.array([r[2] for r in self.rows])

    def outer_residuals(self):
        return np.array([r[2] for r in self.rows if r[1] == 0])

    def last_inner_run(self):
        """Residuals of the last inner solve that took at least 2 iterations."""
        runs = {}
        for outer, inner, res, _ in self.rows:
            runs.setdefault(outer, []).append(res)
        for outer in sorted(runs, reverse=True):
            if len(runs[outer]) >= 2:
                return np.array(runs[outer])
        return None

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,residual,policy_changes\n")
            for i, (_, _, res, ch) in enumerate(self.rows):
                fh.write("%d,%.12e,%d\n" % (i, res, ch))


class SolverError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def _extended(system):
    """Extended-precision copy of the matrix, cached on the system.

    Residuals of the graded systems produced by deep corner refinement sit
    below the float64 evaluation floor, so they are accumulated in 80-bit
    arithmetic.
    """
    ext = getattr(system, "_ext", None)
    if ext is None:
        ext = (system.matrix.astype(np.longdouble),
               system.rhs.astype(np.longdouble))
        system._ext = ext
    return ext


def residual_vector(system, coeffs):
    """A x - b accumulated in extended precision; x may be longdouble."""
    A, b = _extended(system)
    r = A @ coeffs.astype(np.longdouble) - b
    return np.asarray(r, dtype=float)


def refined_solve(system, rel_target=1e-11, max_refine=6):
    """LU solve with mixed-precision iterative refinement.

    Corrections come from float64 triangular solves but accumulate into an
    extended-precision solution, so on strongly graded meshes the attainable
    residual is far below the float64 coefficient-quantization floor.
    Returns the longdouble solution and its scaled residual.
    """
    A = system.matrix.tocsc()
    b = system.rhs
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError("sparse factorization failed: %s" % exc) from exc
    scale = max(np.linalg.norm(b), 1e-300)
    x = lu.solve(b).astype(np.longdouble)
    best_x, best = x, np.linalg.norm(residual_vector(system, x)) / scale
    for _ in range(max_refine):
        if best <= rel_target:
            break
        x = best_x - lu.solve(residual_vector(system, best_x))
        res = np.linalg.norm(residual_vector(system, x)) / scale
        if res < best:
            best, best_x = res, x
        else:
            break
    return best_x, best


def linear_solve(system):
    """Direct sparse LU solve with a residual guarantee of 1e-10."""
    x, res = refined_solve(system, rel_target=1e-11)
    if res > 1e-10:
        raise SolverError("linear solve residual %.3e exceeds tolerance" % res)
    return np.asarray(x, dtype=float)


def _scaled_residual(system, coeffs):
    r = residual_vector(system, coeffs)
    return np.linalg.norm(r) / max(np.linalg.norm(system.rhs), 1e-300)


def _count_changes(fc_a, fc_b):
    return int(np.count_nonzero((fc_a.alpha != fc_b.alpha)
                                | (fc_a.beta != fc_b.beta)))


def _hjb_inner(alpha_field, problem, grid, params, config, space, w, tol,
               trace, outer, first=None):
    """Policy-iteration core on longdouble coefficient arrays.

    Each sweep selects the maximizing beta at every quadrature point at the
    frozen alpha field, assembles the control-frozen linear system and
    replaces the iterate by its refined solution; the scaled residual is
    evaluated before each solve.
    """
    if first is not None:
        fc, system = first
    else:
        _, fc = select_controls(space.function(np.asarray(w, float)),
                                problem, grid, alpha_field=alpha_field)
        system = assemble_linearized(fc, space, problem, grid, params)
    changes = 0
    for inner in range(config.max_inner):
        res = _scaled_residual(system, w)
        trace.append(outer, inner, res, changes)
        if res <= tol:
            return w
        w, _ = refined_solve(system, rel_target=0.1 * tol)
        trace.solves += 1
        _, fc_new = select_controls(space.function(np.asarray(w, float)),
                                    problem, grid, alpha_field=alpha_field)
        changes = _count_changes(fc, fc_new)
        fc = fc_new
        system = assemble_linearized(fc, space, problem, grid, params)
    raise SolverError("inner Newton iteration limit (%d) exceeded"
                      % config.max_inner, trace)


def solve_hjb_fixed_alpha(alpha_field, problem, grid, params, config, space,
                          initial, tol=None, trace=None, outer=0):
    """Policy iteration on the sup-player subproblem at a frozen alpha field."""
    tol = config.tol if tol is None else tol
    trace = trace if trace is not None else SolveTrace()
    w = _hjb_inner(alpha_field, problem, grid, params, config, space,
                   initial.coeffs.astype(np.longdouble), tol, trace, outer)
    return space.function(np.asarray(w, float)), trace


def solve_isaacs(problem, grid, params, config, space, initial=None):
    """Howard-type outer loop: freeze the minimizing control at the current
    iterate, solve the resulting HJB subproblem inexactly, repeat.

    The inner tolerance is max(tol, 0.1 * outer residual); termination is on
    the full inf-sup residual.  The iterate is carried in extended precision
    so that the residual certificate is not limited by coefficient rounding.
    """
    if initial is None:
        w = np.zeros(space.ndofs, dtype=np.longdouble)
    else:
        w = initial.coeffs.astype(np.longdouble)
    trace = SolveTrace()
    for outer in range(config.max_outer):
        _, fc = select_controls(space.function(np.asarray(w, float)),
                                problem, grid)
        system = assemble_linearized(fc, space, problem, grid, params)
        res = _scaled_residual(system, w)
        if res <= config.tol:
            trace.append(outer, 0, res, 0)
            return space.function(np.asarray(w, float)), trace
        inner_tol = max(config.tol, 0.1 * res)
        w = _hjb_inner(fc.alpha, problem, grid, params, config, space, w,
                       inner_tol, trace, outer, first=(fc, system))
    raise SolverError("outer iteration limit (%d) exceeded" % config.max_outer,
                      trace)
