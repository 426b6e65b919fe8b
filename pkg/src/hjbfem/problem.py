"""Isaacs / HJB problem data: control grids, coefficients, Cordes checks and
pointwise evaluation of the renormalized operator with optimal-control
selection.

Coefficient evaluators are vectorized over points: a(x, alpha, beta) takes
x of shape (n, 2) and scalar control values, returning (n, 2, 2); b returns
(n, 2); c and f return (n,).  b and c may be None, meaning identically zero,
in which case lam must be 0.
"""

import numpy as np


class ControlGrid:
    """Finite discretizations of the two compact control sets."""

    def __init__(self, alphas, betas):
        self.alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
        self.betas = np.atleast_1d(np.asarray(betas, dtype=float))
        if self.alphas.size == 0 or self.betas.size == 0:
            raise ValueError("control grids must be nonempty")

    @property
    def n_alpha(self):
        return len(self.alphas)

    @property
    def n_beta(self):
        return len(self.betas)


class IsaacsProblem:
    """Operator data for inf_alpha sup_beta [a:D2 u + b.grad u - c u - f]."""

    def __init__(self, a, f, b=None, c=None, lam=0.0, name="", payoff=None,
                 frozen=None):
        if (b is not None or c is not None) and lam <= 0.0:
            raise ValueError("nonzero lower-order terms require lam > 0")
        if b is None and c is None and lam != 0.0:
            raise ValueError("lam must be 0 when b and c vanish identically")
        self.a = a
        self.b = b
        self.c = c
        self.f = f
        self.lam = float(lam)
        self.name = name
        self.payoff = payoff  # optional fast replacement for payoff_table
        self.frozen = frozen  # optional fast frozen-coefficient gather

    @property
    def has_lower_order(self):
        return self.b is not None or self.c is not None

    def eval_b(self, x, alpha, beta):
        if self.b is None:
            return np.zeros((len(x), 2))
        return self.b(x, alpha, beta)

    def eval_c(self, x, alpha, beta):
        if self.c is None:
            return np.zeros(len(x))
        return self.c(x, alpha, beta)


class PointState:
    """Arguments of the linear operators at one point."""

    def __init__(self, M, g, u, x):
        self.M = np.asarray(M, dtype=float)
        self.g = np.asarray(g, dtype=float)
        self.u = float(u)
        self.x = np.asarray(x, dtype=float)
        if not np.allclose(self.M, self.M.T):
            raise ValueError("Hessian argument must be symmetric")


class CordesReport:
    def __init__(self, nu, satisfied, worst_point, worst_controls):
        self.nu = nu
        self.satisfied = satisfied
        self.worst_point = worst_point
        self.worst_controls = worst_controls


def gamma(problem, x, alpha, beta):
    """Renormalization: Tr a / |a|_F^2, or the lower-order variant
    (Tr a + c/lam) / (|a|_F^2 + |b|^2/(2 lam) + c^2/lam^2)."""
    x = np.atleast_2d(x)
    a = problem.a(x, alpha, beta)
    tr = a[:, 0, 0] + a[:, 1, 1]
    fro2 = np.einsum("nij,nij->n", a, a)
    if not problem.has_lower_order:
        return tr / fro2
    lam = problem.lam
    b = problem.eval_b(x, alpha, beta)
    c = problem.eval_c(x, alpha, beta)
    num = tr + c / lam
    den = fro2 + np.einsum("ni,ni->n", b, b) / (2.0 * lam) + (c / lam) ** 2
    return num / den


def verify_cordes(problem, sample_points, control_grid):
    """Largest nu in (0, 1] such that the Cordes bound holds at all sampled
    points and grid controls; the report carries failure rather than raising.
    """
    x = np.atleast_2d(sample_points)
    best = np.inf
    worst = (None, None)
    for alpha in control_grid.alphas:
        for beta in control_grid.betas:
            a = problem.a(x, alpha, beta)
            tr = a[:, 0, 0] + a[:, 1, 1]
            fro2 = np.einsum("nij,nij->n", a, a)
            if not problem.has_lower_order:
                nu_here = tr ** 2 / fro2 - 1.0
            else:
                lam = problem.lam
                b = problem.eval_b(x, alpha, beta)
                c = problem.eval_c(x, alpha, beta)
                den = fro2 + np.einsum("ni,ni->n", b, b) / (2.0 * lam) + (c / lam) ** 2
                nu_here = (tr + c / lam) ** 2 / den - 2.0
            i = int(np.argmin(nu_here))
            if nu_here[i] < best:
                best = float(nu_here[i])
                worst = (x[i].copy(), (float(alpha), float(beta)))
    nu = min(best, 1.0)
    return CordesReport(nu, nu > 0.0, worst[0], worst[1])


def payoff_table(problem, grid, x, M, g, u):
    """gamma (L v - f) at each point for every control pair; (n, na, nb)."""
    x = np.atleast_2d(x)
    n = len(x)
    M = np.broadcast_to(M, (n, 2, 2))
    table = np.empty((n, grid.n_alpha, grid.n_beta))
    lower = problem.has_lower_order
    if lower:
        g = np.broadcast_to(g, (n, 2))
        u = np.broadcast_to(u, (n,))
    for i, alpha in enumerate(grid.alphas):
        for j, beta in enumerate(grid.betas):
            a = problem.a(x, alpha, beta)
            val = np.einsum("nij,nij->n", a, M) - problem.f(x, alpha, beta)
            if lower:
                val = val + np.einsum("ni,ni->n", problem.eval_b(x, alpha, beta), g) \
                    - problem.eval_c(x, alpha, beta) * u
            table[:, i, j] = gamma(problem, x, alpha, beta) * val
    return table


def evaluate_payoff(problem, grid, x, M, g, u):
    """Payoff table dispatch: a problem may install a fast implementation."""
    if problem.payoff is not None:
        return problem.payoff(grid, x, M, g, u)
    return payoff_table(problem, grid, x, M, g, u)


_TIE_REL = 1e-12


def sup_with_ties(rows):
    """Max over the last axis; among near-ties (relative 1e-12) the lowest
    index wins, so the selection is stable under roundoff noise."""
    m = rows.max(axis=-1)
    mn = rows.min(axis=-1)
    tol = _TIE_REL * np.maximum(np.maximum(np.abs(m), np.abs(mn)), 1e-300)
    bi = np.argmax(rows >= (m - tol)[..., None], axis=-1)
    return np.take_along_axis(rows, bi[..., None], axis=-1)[..., 0], bi


def infsup_from_table(table):
    """min over alpha of max over beta; the lowest index wins (near-)ties.

    Returns (value, alpha index, beta index) arrays over the leading axis.
    """
    sup, bi_all = sup_with_ties(table)
    m = sup.min(axis=1)
    tol = _TIE_REL * np.maximum(np.maximum(np.abs(m), np.abs(sup).max(axis=1)),
                                1e-300)
    ai = np.argmax(sup <= (m + tol)[:, None], axis=1)
    rows = np.arange(table.shape[0])
    return sup[rows, ai], ai, bi_all[rows, ai]


def f_gamma_point(problem, control_grid, state):
    """Renormalized inf-sup value at one PointState with optimizing indices."""
    table = payoff_table(problem, control_grid, state.x[None, :],
                         state.M[None, :, :], state.g[None, :],
                         np.array([state.u]))
    val, ai, bi = infsup_from_table(table)
    return float(val[0]), int(ai[0]), int(bi[0])


def f_point(problem, control_grid, state):
    """Unrenormalized inf-sup value (no gamma factor) at one PointState."""
    x = state.x[None, :]
    vals = np.empty((control_grid.n_alpha, control_grid.n_beta))
    for i, alpha in enumerate(control_grid.alphas):
        for j, beta in enumerate(control_grid.betas):
            a = problem.a(x, alpha, beta)
            v = np.einsum("nij,nij->n", a, state.M[None]) - problem.f(x, alpha, beta)
            if problem.has_lower_order:
                v = v + problem.eval_b(x, alpha, beta) @ state.g \
                    - problem.eval_c(x, alpha, beta) * state.u
            vals[i, j] = v[0]
    return float(vals.max(axis=1).min())


def pointwise_nu(problem, control_grid, x):
    """Sharpest Cordes constant at the points x over the control grid."""
    report = verify_cordes(problem, x, control_grid)
    return report.nu


class LipschitzCheck:
    def __init__(self, lhs, rhs, lhs_refined, rhs_refined):
        self.lhs = lhs
        self.rhs = rhs
        self.lhs_refined = lhs_refined
        self.rhs_refined = rhs_refined


def lipschitz_check_point(problem, control_grid, state1, state2, lam):
    """Pointwise Lipschitz bounds of the renormalized operator.

    Returns lhs = |F_g(s1) - F_g(s2)| and rhs = (1 + sqrt(d+1)) w with
    w = sqrt(|M1-M2|_F^2 + 2 lam |g1-g2|^2 + lam^2 |u1-u2|^2), plus the
    refined pair with the Laplacian-difference subtracted on the left and
    the factor sqrt(1 - nu) on the right.
    """
    if not np.allclose(state1.x, state2.x):
        raise ValueError("states must be taken at the same point")
    v1, _, _ = f_gamma_point(problem, control_grid, state1)
    v2, _, _ = f_gamma_point(problem, control_grid, state2)
    dM = state1.M - state2.M
    dg = state1.g - state2.g
    du = state1.u - state2.u
    w = np.sqrt(np.sum(dM * dM) + 2.0 * lam * dg @ dg + lam ** 2 * du ** 2)
    lhs = abs(v1 - v2)
    rhs = (1.0 + np.sqrt(3.0)) * w
    llam = np.trace(dM) - lam * du
    nu = pointwise_nu(problem, control_grid, state1.x[None, :])
    lhs_ref = abs(v1 - v2 - llam)
    rhs_ref = np.sqrt(max(1.0 - nu, 0.0)) * w
    return LipschitzCheck(lhs, rhs, lhs_ref, rhs_ref)
