"""Averaging enrichments into conforming subspaces and the discrete
Miranda-Talenti diagnostics.

These operators power property tests of the stabilization analysis; none of
them sit on the solve path.
"""

import numpy as np

from .fespace import (ElementTables, FaceTables, FESpace, ReferenceBasis,
                      continuous_nodes, element_geometry, jump_integrals,
                      function_values)


class VectorFieldSpace:
    """Piecewise polynomial vector fields of degree p-1 on a mesh.

    Carries the continuous-node identification (without any boundary
    constraint) plus the flat/sharp classification of boundary nodes used by
    the averaging enrichment.
    """

    def __init__(self, mesh, p, angle_tol=1e-10):
        if p < 2:
            raise ValueError("fields have degree p-1, so p must be >= 2")
        self.mesh = mesh
        self.p = p
        self.degree = p - 1
        self.basis = ReferenceBasis(self.degree)
        self.node_ids, self.n_nodes, self.node_on_boundary, self.node_coords = \
            continuous_nodes(mesh, self.basis)
        self._classify_boundary(angle_tol)
        self._cache = {}

    def _classify_boundary(self, angle_tol):
        mesh = self.mesh
        nv = mesh.n_vertices
        n_edge = max(self.degree - 1, 0)
        has_normal = np.zeros(self.n_nodes, dtype=bool)
        sharp = np.zeros(self.n_nodes, dtype=bool)
        normal = np.zeros((self.n_nodes, 2))
        for f in np.nonzero(mesh.boundary)[0]:
            nrm = mesh.face_normal[f]
            nodes = list(mesh.face_vertices[f])
            nodes += [nv + f * n_edge + m for m in range(n_edge)]
            for node in nodes:
                if not has_normal[node]:
                    has_normal[node] = True
                    normal[node] = nrm
                elif abs(normal[node, 0] * nrm[1] - normal[node, 1] * nrm[0]) > angle_tol:
                    sharp[node] = True
        self.node_sharp = sharp
        self.node_normal = normal

    @property
    def nb(self):
        return self.basis.nb

    def element_tables(self, order):
        key = ("elem", order)
        if key not in self._cache:
            self._cache[key] = ElementTables(self.mesh, self.basis, order)
        return self._cache[key]

    def face_tables(self, order):
        key = ("face", order)
        if key not in self._cache:
            self._cache[key] = FaceTables(self.mesh, self.basis, order)
        return self._cache[key]

    @property
    def quad_order(self):
        return 2 * self.p

    @property
    def face_quad_order(self):
        return 2 * self.p + 1

    def field(self, coeffs=None):
        if coeffs is None:
            coeffs = np.zeros((self.mesh.n_elements, self.nb, 2))
        return VectorField(self, np.asarray(coeffs, dtype=float))


class VectorField:
    """Nodal coefficients (element, lattice node, component)."""

    def __init__(self, space, coeffs):
        if coeffs.shape != (space.mesh.n_elements, space.nb, 2):
            raise ValueError("coefficient array has wrong shape")
        self.space = space
        self.coeffs = coeffs


def gradient_field(v, vspace=None):
    """Piecewise gradient of a scalar FE function as a degree p-1 field."""
    space = v.space
    if vspace is None:
        vspace = VectorFieldSpace(space.mesh, space.p)
    elif vspace.mesh is not space.mesh or vspace.degree != space.p - 1:
        raise ValueError("field space must share the mesh with degree p-1")
    _, _, inv, _ = element_geometry(space.mesh)
    gref = space.basis.grad(vspace.basis.nodes)      # (nbv, nb, 2)
    c = v.local_coeffs()
    gl = np.einsum("eb,nbj->enj", c, gref)
    return vspace.field(np.einsum("eji,enj->eni", inv, gl))


def enrich_vector(w):
    """Averaging enrichment into continuous fields with zero tangential
    boundary trace.

    Interior nodes average the adjacent values; flat boundary nodes keep the
    averaged normal component only; sharp (corner) nodes are zeroed.
    """
    space = w.space
    sums = np.zeros((space.n_nodes, 2))
    np.add.at(sums, space.node_ids.ravel(), w.coeffs.reshape(-1, 2))
    counts = np.bincount(space.node_ids.ravel(), minlength=space.n_nodes)
    avg = sums / np.maximum(counts, 1)[:, None]
    nrm = space.node_normal
    on_b = space.node_on_boundary
    proj = np.einsum("ni,ni->n", avg, nrm)[:, None] * nrm
    avg = np.where(on_b[:, None], proj, avg)
    avg[space.node_sharp] = 0.0
    return space.field(avg[space.node_ids])


def vf_norms(w):
    """Field norm and jump seminorm: the jump part carries full vector jumps
    on interior faces and tangential traces on boundary faces."""
    space = w.space
    etab = space.element_tables(space.quad_order)
    vals = np.einsum("ebc,qb->eqc", w.coeffs, etab.val)
    jac = np.einsum("ebc,eqbd->eqcd", w.coeffs, etab.grad)
    vol = np.einsum("eq,eqcd,eqcd->", etab.w, jac, jac) \
        + np.einsum("eq,eqc,eqc->", etab.w, vals, vals)

    mesh = space.mesh
    ftab = space.face_tables(space.face_quad_order)
    cf = np.zeros((mesh.n_faces, 2) + w.coeffs.shape[1:])
    for side in (0, 1):
        ok = mesh.face_elems[:, side] >= 0
        cf[ok, side] = w.coeffs[mesh.face_elems[ok, side]]
    tr = np.einsum("fsbc,fsqb->fsqc", cf, ftab.val)
    jmp = np.einsum("fs,fsqc->fqc", ftab.jump_s, tr)
    h = mesh.h_face
    full = np.einsum("fq,fqc,fqc->f", ftab.w, jmp, jmp) / h
    tang = np.einsum("fq,fq->f", ftab.w,
                     np.einsum("fqc,fc->fq", jmp, mesh.face_tangent) ** 2) / h
    jump_sq = float(np.sum(np.where(ftab.interior, full, tang)))
    return np.sqrt(vol + jump_sq), np.sqrt(jump_sq)


def enrich_scalar(v, target=None):
    """Nodal averaging of a DG function into the continuous zero-trace space."""
    space = v.space
    if space.s != 0:
        raise ValueError("enrichment takes a discontinuous (s=0) input")
    if target is None:
        target = FESpace(space.mesh, 1, space.p)
    elif target.mesh is not space.mesh or target.p != space.p:
        raise ValueError("target space must share the mesh and degree")
    vals = v.local_coeffs()
    sums = np.zeros(target.n_nodes)
    np.add.at(sums, target.node_ids.ravel(), vals.ravel())
    counts = np.bincount(target.node_ids.ravel(), minlength=target.n_nodes)
    avg = sums / np.maximum(counts, 1)
    return target.function(avg[target.node_of_dof])


def miranda_talenti_gap(v):
    """(||D2 v||, ||Lap v||, |v|_J): the discrete Miranda-Talenti inequality
    bounds the difference of the first two by a multiple of the third."""
    space = v.space
    etab = space.element_tables(space.quad_order)
    _, _, hess = function_values(v, etab)
    lap = hess[..., 0, 0] + hess[..., 1, 1]
    h2 = np.einsum("eq,eqij,eqij->", etab.w, hess, hess)
    l2 = np.einsum("eq,eq->", etab.w, lap ** 2)
    ftab = space.face_tables(space.face_quad_order)
    int_g, int_v = jump_integrals(v, ftab)
    return np.sqrt(h2), np.sqrt(l2), np.sqrt(int_g.sum() + int_v.sum())
