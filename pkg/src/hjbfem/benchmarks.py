"""Built-in benchmark problems and their exact solutions.

Problems are selectable by name: "pentagon-isaacs" (anisotropic rotating
diffusions on a pentagon with a corner singularity), "square-laplace"
(single control, identity diffusion) and "square-smooth-hjb" (two diagonal
diffusions).  All use a manufactured source f = a : D2(u_exact), so the
exact solution solves the equation for every control and the inf-sup of the
residual vanishes there.
"""

import numpy as np

from .mesh import build_mesh, uniform_refine
from .problem import ControlGrid, IsaacsProblem


# -- exact solutions -----------------------------------------------------

class PentagonExact:
    """u(r, rho) = -r^k sin(k rho) eta(r) in polar coordinates, where
    k = pi/(pi - phi) and eta(r) = exp(1/(4 r^2 - 1)) inside r < 1/2.

    The corner at the origin has interior angle pi - phi, so u vanishes on
    both boundary edges meeting there; the cutoff enforces u = 0 on the rest
    of the boundary.
    """

    def __init__(self, phi):
        self.phi = float(phi)
        self.k = np.pi / (np.pi - self.phi)

    def _radial(self, r):
        """R(r) = -r^k eta(r) and its first two derivatives.

        Outside the cutoff support everything vanishes; the second
        derivative is unbounded at r = 0 (that is the point of the
        benchmark) and must not be evaluated there.
        """
        k = self.k
        inside = r < 0.5 - 1e-14
        rs = np.where(inside, r, 0.25)  # dummy value outside the support
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            q = 4.0 * rs ** 2 - 1.0
            g = 1.0 / q
            dg = -8.0 * rs / q ** 2
            d2g = -8.0 / q ** 2 + 128.0 * rs ** 2 / q ** 3
            eta = np.exp(g)
            deta = dg * eta
            d2eta = (d2g + dg ** 2) * eta
            rk = rs ** k
            R = -rk * eta
            dR = -(k * rs ** (k - 1) * eta + rk * deta)
            d2R = -(k * (k - 1) * rs ** (k - 2) * eta
                    + 2.0 * k * rs ** (k - 1) * deta + rk * d2eta)
        zero = np.zeros_like(r)
        return (np.where(inside, R, zero), np.where(inside, dR, zero),
                np.where(inside, d2R, zero))

    def value(self, x):
        x = np.atleast_2d(x)
        r = np.hypot(x[:, 0], x[:, 1])
        rho = np.arctan2(x[:, 1], x[:, 0])
        R, _, _ = self._radial(r)
        return R * np.sin(self.k * rho)

    def gradient(self, x):
        x = np.atleast_2d(x)
        r = np.hypot(x[:, 0], x[:, 1])
        rho = np.arctan2(x[:, 1], x[:, 0])
        R, dR, _ = self._radial(r)
        k = self.k
        s, c = np.sin(k * rho), np.cos(k * rho)
        er = np.stack([np.cos(rho), np.sin(rho)], axis=1)
        et = np.stack([-np.sin(rho), np.cos(rho)], axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            u_r = dR * s
            u_t = np.where(r > 0, R * k * c / r, 0.0)
        return u_r[:, None] * er + u_t[:, None] * et

    def hessian(self, x):
        x = np.atleast_2d(x)
        r = np.hypot(x[:, 0], x[:, 1])
        rho = np.arctan2(x[:, 1], x[:, 0])
        R, dR, d2R = self._radial(r)
        k = self.k
        s, c = np.sin(k * rho), np.cos(k * rho)
        er = np.stack([np.cos(rho), np.sin(rho)], axis=1)
        et = np.stack([-np.sin(rho), np.cos(rho)], axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            u_rr = d2R * s
            mixed = np.where(r > 0, (dR * k * c - R * k * c / r) / r, 0.0)
            ang = np.where(r > 0, dR / r - R * k ** 2 / r ** 2, 0.0) * s
        rr = np.einsum("ni,nj->nij", er, er)
        rt = np.einsum("ni,nj->nij", er, et) + np.einsum("ni,nj->nij", et, er)
        tt = np.einsum("ni,nj->nij", et, et)
        return u_rr[:, None, None] * rr + mixed[:, None, None] * rt \
            + ang[:, None, None] * tt


class SineExact:
    """u = sin(pi x) sin(pi y) on the unit square."""

    def value(self, x):
        x = np.atleast_2d(x)
        return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])

    def gradient(self, x):
        x = np.atleast_2d(x)
        sx, cx = np.sin(np.pi * x[:, 0]), np.cos(np.pi * x[:, 0])
        sy, cy = np.sin(np.pi * x[:, 1]), np.cos(np.pi * x[:, 1])
        return np.pi * np.stack([cx * sy, sx * cy], axis=1)

    def hessian(self, x):
        x = np.atleast_2d(x)
        sx, cx = np.sin(np.pi * x[:, 0]), np.cos(np.pi * x[:, 0])
        sy, cy = np.sin(np.pi * x[:, 1]), np.cos(np.pi * x[:, 1])
        H = np.empty((len(x), 2, 2))
        H[:, 0, 0] = -np.pi ** 2 * sx * sy
        H[:, 1, 1] = -np.pi ** 2 * sx * sy
        H[:, 0, 1] = np.pi ** 2 * cx * cy
        H[:, 1, 0] = H[:, 0, 1]
        return H


def check_exact_derivatives(exact, points, h=1e-6, rtol=1e-6):
    """Central finite-difference validation of the closed-form derivatives."""
    x = np.atleast_2d(points)
    ex = np.array([h, 0.0])
    ey = np.array([0.0, h])
    gfd = np.stack([(exact.value(x + ex) - exact.value(x - ex)) / (2 * h),
                    (exact.value(x + ey) - exact.value(x - ey)) / (2 * h)], axis=1)
    g = exact.gradient(x)
    scale = np.maximum(np.linalg.norm(g, axis=1), 1.0)
    if not np.all(np.linalg.norm(g - gfd, axis=1) <= rtol * scale):
        raise AssertionError("gradient disagrees with finite differences")
    hfd = np.stack([(exact.gradient(x + ex) - exact.gradient(x - ex)) / (2 * h),
                    (exact.gradient(x + ey) - exact.gradient(x - ey)) / (2 * h)],
                   axis=2)
    H = exact.hessian(x)
    scale = np.maximum(np.sqrt(np.einsum("nij,nij->n", H, H)), 1.0)
    err = np.sqrt(np.einsum("nij,nij->n", H - hfd, H - hfd))
    if not np.all(err <= rtol * scale):
        raise AssertionError("Hessian disagrees with finite differences")
    return True


# -- meshes ---------------------------------------------------------------

def pentagon_vertices(phi=np.pi / 10):
    return np.array([
        [0.0, 0.0],
        [1.0, 0.0],
        [1.0, 1.0],
        [np.cos(np.pi - phi), 1.0],
        [np.cos(np.pi - phi), np.sin(np.pi - phi)],
    ])


def initial_pentagon_mesh(phi=np.pi / 10):
    """Centroid fan (5 triangles) plus one uniform refinement: 20 elements."""
    verts = pentagon_vertices(phi)
    centroid = verts.mean(axis=0)
    pts = np.vstack([verts, centroid])
    tris = [(i, (i + 1) % 5, 5) for i in range(5)]
    return uniform_refine(build_mesh(pts, tris))


def initial_square_mesh():
    return build_mesh([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
                      [(0, 1, 2), (0, 2, 3)])


# -- problems -------------------------------------------------------------

def _rotation(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def _diffusion_tables(alphas, betas):
    """a = R_beta diag((cos a + sin a)/sqrt2, (cos a - sin a)/sqrt2) R_beta^T
    for every grid pair; (na, nb, 2, 2)."""
    na, nb = len(alphas), len(betas)
    tab = np.empty((na, nb, 2, 2))
    for i, al in enumerate(alphas):
        d1 = (np.cos(al) + np.sin(al)) / np.sqrt(2.0)
        d2 = (np.cos(al) - np.sin(al)) / np.sqrt(2.0)
        D = np.diag([d1, d2])
        for j, bt in enumerate(betas):
            R = _rotation(bt)
            tab[i, j] = R @ D @ R.T
    return tab


def pentagon_problem(phi=np.pi / 10, alpha_max=9 * np.pi / 40,
                     n_alpha=16, n_beta=32):
    """The pentagon Isaacs benchmark.

    Controls: alpha in [0, alpha_max] scales anisotropy, beta in [0, pi)
    rotates the principal axes (rotations have period pi on symmetric
    matrices, so the half interval covers the full rotation group).  The
    source is manufactured from the corner-singular exact solution.
    """
    if not 0.0 < phi <= np.pi / 4:
        raise ValueError("phi must lie in (0, pi/4]")
    if not 0.0 <= alpha_max < np.pi / 4:
        raise ValueError("alpha_max must lie in [0, pi/4)")
    alphas = np.linspace(0.0, alpha_max, n_alpha)
    betas = np.linspace(0.0, np.pi, n_beta, endpoint=False)
    grid = ControlGrid(alphas, betas)
    exact = PentagonExact(phi)
    a_tab = _diffusion_tables(alphas, betas)
    gamma_tab = np.einsum("abii->ab", a_tab) / np.einsum("abij,abij->ab",
                                                         a_tab, a_tab)

    def a_eval(x, alpha, beta):
        d1 = (np.cos(alpha) + np.sin(alpha)) / np.sqrt(2.0)
        d2 = (np.cos(alpha) - np.sin(alpha)) / np.sqrt(2.0)
        R = _rotation(beta)
        ae = R @ np.diag([d1, d2]) @ R.T
        return np.broadcast_to(ae, (len(np.atleast_2d(x)), 2, 2))

    def f_eval(x, alpha, beta):
        a = a_eval(x, alpha, beta)
        return np.einsum("nij,nij->n", a, exact.hessian(x))

    ga_flat = (gamma_tab[:, :, None, None] * a_tab).reshape(-1, 4)

    def fast_payoff(grid_, x, M, g, u):
        # f = a : H(x) for every pair, so the table is gamma * a : (M - H)
        x = np.atleast_2d(x)
        diff = np.broadcast_to(M, (len(x), 2, 2)) - exact.hessian(x)
        table = diff.reshape(-1, 4) @ ga_flat.T
        return table.reshape(len(x), n_alpha, n_beta)

    def fast_frozen(grid_, fc, x):
        # coefficients at frozen controls via table lookups; gamma f needs
        # a single exact-Hessian evaluation at the quadrature points
        ai = fc.alpha.reshape(-1)
        bi = fc.beta.reshape(-1)
        gam = gamma_tab[ai, bi]
        a = a_tab[ai, bi]
        H = exact.hessian(x)
        gf = np.einsum("nij,nij->n", gam[:, None, None] * a, H)
        zeros = np.zeros((len(x), 2))
        return gam, a, zeros, zeros[:, 0], gf

    prob = IsaacsProblem(a_eval, f_eval, lam=0.0, name="pentagon-isaacs",
                         payoff=fast_payoff, frozen=fast_frozen)
    return prob, grid, exact, initial_pentagon_mesh(phi)


def square_laplace():
    """Single control, identity diffusion: F[u] = Laplace(u) - f."""
    exact = SineExact()

    def a_eval(x, alpha, beta):
        return np.broadcast_to(np.eye(2), (len(np.atleast_2d(x)), 2, 2))

    def f_eval(x, alpha, beta):
        H = exact.hessian(x)
        return H[:, 0, 0] + H[:, 1, 1]

    prob = IsaacsProblem(a_eval, f_eval, lam=0.0, name="square-laplace")
    grid = ControlGrid([0.0], [0.0])
    return prob, grid, exact, initial_square_mesh()


def square_smooth_hjb():
    """Sup over two diagonal diffusions with a smooth manufactured solution."""
    exact = SineExact()
    mats = np.array([np.eye(2), np.diag([2.0, 1.0])])

    def a_eval(x, alpha, beta):
        return np.broadcast_to(mats[int(beta)], (len(np.atleast_2d(x)), 2, 2))

    def f_eval(x, alpha, beta):
        a = mats[int(beta)]
        return np.einsum("ij,nij->n", a, exact.hessian(x))

    prob = IsaacsProblem(a_eval, f_eval, lam=0.0, name="square-smooth-hjb")
    grid = ControlGrid([0.0], [0.0, 1.0])
    return prob, grid, exact, initial_square_mesh()


_BUILDERS = {
    "pentagon-isaacs": pentagon_problem,
    "pentagon": pentagon_problem,
    "square-laplace": square_laplace,
    "square-smooth-hjb": square_smooth_hjb,
}


def make_problem(name, **kwargs):
    """Problem constructor dispatch; returns (problem, grid, exact, mesh)."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ValueError("unknown problem %r; available: %s"
                         % (name, ", ".join(sorted(_BUILDERS)))) from None
    return builder(**kwargs)
