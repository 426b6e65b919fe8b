"""Residual a posteriori error estimators and true-error norms.

The elementwise estimator is
    eta_K^2 = int_K |F_g[v]|^2
            + sum interior F of K: (1/2) h^-1 int |[grad v]|^2
            + sum faces F of K: delta_F h^-3 int |[v]|^2
with delta_F = 1/2 on interior and 1 on boundary faces; the volume residual
carries no mesh-size weight.  Summing eta_K^2 over elements gives the global
estimator squared.
"""

import numpy as np

from .fespace import function_values, jump_integrals
from .forms import select_controls


class EstimatorReport:
    def __init__(self, eta_K, error_K=None):
        self.eta_K = eta_K
        self.eta = float(np.sqrt(np.sum(eta_K ** 2)))
        self.error_K = error_K
        if error_K is not None:
            self.error = float(np.sqrt(np.sum(error_K ** 2)))
            self.effectivity = self.eta / self.error if self.error > 0 else np.inf
        else:
            self.error = None
            self.effectivity = None


def _scatter_face_terms(space, int_g, int_v, out_sq):
    """delta_F-weighted face contributions added to per-element squares."""
    mesh = space.mesh
    delta = np.where(mesh.boundary, 1.0, 0.5)
    contrib = delta * (int_g + int_v)
    for side in (0, 1):
        ok = mesh.face_elems[:, side] >= 0
        np.add.at(out_sq, mesh.face_elems[ok, side], contrib[ok])
    return out_sq


def estimate_eta(v, problem, grid, quad_order=None, face_quad_order=None):
    """Per-element estimator values eta_K for an arbitrary member of the
    approximation space (not only the discrete solution)."""
    space = v.space
    F, _ = select_controls(v, problem, grid, quad_order=quad_order)
    etab = space.element_tables(quad_order or space.quad_order)
    eta_sq = np.einsum("eq,eq->e", etab.w, F ** 2)
    ftab = space.face_tables(face_quad_order or space.face_quad_order)
    int_g, int_v = jump_integrals(v, ftab)
    _scatter_face_terms(space, int_g, int_v, eta_sq)
    return np.sqrt(eta_sq)


def eta_local(v, K, problem, grid, quad_order=None, face_quad_order=None):
    """Estimator of a single element (mostly for tests; use estimate_eta
    for all elements at once)."""
    return float(estimate_eta(v, problem, grid, quad_order, face_quad_order)[K])


def error_norm(exact, v, lam=0.0, quad_order=None, face_quad_order=None):
    """Global and per-element localized error norms against a known solution.

    The exact solution has no jumps (it lies in H^2 with zero trace), so the
    face terms reduce to the jumps of v, delta_F-weighted per element.  The
    volume terms default to a quadrature of order 2p + 2.
    """
    space = v.space
    etab = space.element_tables(quad_order or 2 * space.p + 2)
    vals, grads, hess = function_values(v, etab)
    x = etab.x.reshape(-1, 2)
    dv = exact.value(x).reshape(vals.shape) - vals
    dg = exact.gradient(x).reshape(grads.shape) - grads
    dh = exact.hessian(x).reshape(hess.shape) - hess
    err_sq = np.einsum("eq,eqij,eqij->e", etab.w, dh, dh) \
        + np.einsum("eq,eqi,eqi->e", etab.w, dg, dg) \
        + np.einsum("eq,eq->e", etab.w, dv ** 2)
    ftab = space.face_tables(face_quad_order or space.face_quad_order)
    int_g, int_v = jump_integrals(v, ftab)
    _scatter_face_terms(space, int_g, int_v, err_sq)
    err_K = np.sqrt(err_sq)
    return float(np.sqrt(err_sq.sum())), err_K


def export_eta_csv(path, eta_K, error_K=None):
    """Per-element estimator CSV: element index, eta_K, error_K."""
    with open(path, "w") as fh:
        fh.write("element,eta_K,error_K\n")
        for k, e in enumerate(eta_K):
            err = "" if error_K is None else "%.12e" % error_K[k]
            fh.write("%d,%.12e,%s\n" % (k, e, err))
