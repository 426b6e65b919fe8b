"""Quadrature rules on the reference triangle and the unit segment."""

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

_MAX_ORDER = 60


class QuadratureRule:
    """Positive-weight rule exact for polynomials up to ``order``.

    ``points`` are reference coordinates: (n, 2) on the triangle with
    vertices (0,0), (1,0), (0,1), or (n,) in [0,1] on the segment.
    """

    def __init__(self, domain, order, points, weights):
        self.domain = domain
        self.order = order
        self.points = points
        self.weights = weights

    @property
    def barycentric(self):
        if self.domain != "triangle":
            raise ValueError("barycentric coordinates only defined on triangles")
        x, y = self.points[:, 0], self.points[:, 1]
        return np.stack([1.0 - x - y, x, y], axis=1)


def quadrature(domain, order):
    """Rule on 'triangle' (measure 1/2) or 'segment' (measure 1).

    The triangle rule is a conical product of Gauss-Jacobi and
    Gauss-Legendre rules, so weights are positive at every order.
    """
    if order < 0 or order > _MAX_ORDER:
        raise ValueError("unsupported quadrature order %r" % (order,))
    if domain == "segment":
        n = max(1, (order + 2) // 2)
        x, w = roots_legendre(n)
        return QuadratureRule(domain, order, 0.5 * (x + 1.0), 0.5 * w)
    if domain == "triangle":
        n = max(1, (order + 2) // 2)
        xj, wj = roots_jacobi(n, 1.0, 0.0)   # weight (1-x) on [-1, 1]
        xl, wl = roots_legendre(n)
        u, wu = 0.5 * (xj + 1.0), 0.25 * wj  # weight (1-u) on [0, 1]
        v, wv = 0.5 * (xl + 1.0), 0.5 * wl
        # x = u, y = v (1 - u); Jacobian (1 - u) absorbed by the Jacobi weight
        U, V = np.meshgrid(u, v, indexing="ij")
        pts = np.stack([U.ravel(), (V * (1.0 - U)).ravel()], axis=1)
        wts = np.outer(wu, wv).ravel()
        return QuadratureRule(domain, order, pts, wts)
    raise ValueError("unknown quadrature domain %r" % (domain,))
