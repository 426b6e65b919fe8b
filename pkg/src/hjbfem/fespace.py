"""Reference bases, DG / C0 finite element spaces, traces, jumps and norms.

Degrees of freedom are Lagrange point values on a uniform lattice of the
reference triangle.  The continuous space (s=1) identifies shared lattice
nodes across faces structurally (no coordinate hashing) and constrains the
boundary nodes to zero, so it is the subspace of the DG space (s=0) of
continuous functions vanishing on the domain boundary.
"""

import numpy as np

from .mesh import TRI_EDGES
from .quadrature import quadrature

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def _falling(n, k):
    out = 1
    for i in range(k):
        out *= n - i
    return out


class ReferenceBasis:
    """Lagrange basis of total degree p on the uniform reference lattice."""

    def __init__(self, p):
        if p < 0:
            raise ValueError("polynomial degree must be nonnegative")
        self.p = p
        self.exps = [(i, j) for i in range(p + 1) for j in range(p + 1 - i)]
        self.nb = len(self.exps)
        if p == 0:
            self.nodes = np.array([[1.0 / 3.0, 1.0 / 3.0]])
        else:
            self.nodes = np.array([[i / p, j / p] for i, j in
                                   ((i, j) for i in range(p + 1)
                                    for j in range(p + 1 - i))], dtype=float)
        V = self._monomials(self.nodes, 0, 0)
        self.coeff = np.linalg.inv(V)
        self._classify()

    def _classify(self):
        p = self.p
        self.vertex_slots = np.full(3, -1, dtype=np.int64)
        self.edge_nodes = [[] for _ in range(3)]  # (slot, param m) per local edge
        self.interior_slots = []
        if p == 0:
            self.interior_slots = [0]
            self.interior_slots = np.asarray(self.interior_slots)
            return
        for slot, (i, j) in enumerate(((i, j) for i in range(p + 1)
                                       for j in range(p + 1 - i))):
            if i == 0 and j == 0:
                self.vertex_slots[0] = slot
            elif i == p:
                self.vertex_slots[1] = slot
            elif j == p:
                self.vertex_slots[2] = slot
            elif j == 0:
                self.edge_nodes[2].append((slot, i))
            elif i + j == p:
                self.edge_nodes[0].append((slot, j))
            elif i == 0:
                self.edge_nodes[1].append((slot, p - j))
            else:
                self.interior_slots.append(slot)
        for k in range(3):
            self.edge_nodes[k].sort(key=lambda sm: sm[1])
        self.interior_slots = np.asarray(self.interior_slots, dtype=np.int64)

    def _monomials(self, pts, dx, dy):
        pts = np.asarray(pts, dtype=float)
        x, y = pts[:, 0], pts[:, 1]
        cols = []
        for i, j in self.exps:
            if i < dx or j < dy:
                cols.append(np.zeros(len(pts)))
                continue
            c = _falling(i, dx) * _falling(j, dy)
            cols.append(c * x ** (i - dx) * y ** (j - dy))
        return np.stack(cols, axis=1)

    def eval(self, pts):
        return self._monomials(pts, 0, 0) @ self.coeff

    def grad(self, pts):
        gx = self._monomials(pts, 1, 0) @ self.coeff
        gy = self._monomials(pts, 0, 1) @ self.coeff
        return np.stack([gx, gy], axis=2)

    def hess(self, pts):
        hxx = self._monomials(pts, 2, 0) @ self.coeff
        hxy = self._monomials(pts, 1, 1) @ self.coeff
        hyy = self._monomials(pts, 0, 2) @ self.coeff
        H = np.empty((len(pts), self.nb, 2, 2))
        H[:, :, 0, 0] = hxx
        H[:, :, 0, 1] = hxy
        H[:, :, 1, 0] = hxy
        H[:, :, 1, 1] = hyy
        return H


# -- element geometry ----------------------------------------------------

def element_geometry(mesh):
    """Affine maps x = p0 + A xi; cached on the (immutable) mesh."""
    geom = getattr(mesh, "_geom", None)
    if geom is not None:
        return geom
    p0 = mesh.vertices[mesh.elements[:, 0]]
    A = np.empty((mesh.n_elements, 2, 2))
    A[:, :, 0] = mesh.vertices[mesh.elements[:, 1]] - p0
    A[:, :, 1] = mesh.vertices[mesh.elements[:, 2]] - p0
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    inv = np.empty_like(A)
    inv[:, 0, 0] = A[:, 1, 1] / det
    inv[:, 0, 1] = -A[:, 0, 1] / det
    inv[:, 1, 0] = -A[:, 1, 0] / det
    inv[:, 1, 1] = A[:, 0, 0] / det
    geom = (p0, A, inv, det)
    mesh._geom = geom
    return geom


def push_gradient(inv, grad_ref):
    """grad_x = A^{-T} grad_xi for per-element inverse Jacobians."""
    return np.einsum("eji,...ej->...ei", inv, grad_ref) \
        if grad_ref.ndim > 3 else np.einsum("eji,ej->ei", inv, grad_ref)


class ElementTables:
    """Basis values and physical derivatives at element quadrature points."""

    def __init__(self, mesh, basis, order):
        rule = quadrature("triangle", order)
        p0, A, inv, det = element_geometry(mesh)
        self.rule = rule
        self.nq = len(rule.points)
        self.x = p0[:, None, :] + np.einsum("eij,qj->eqi", A, rule.points)
        self.w = det[:, None] * rule.weights[None, :]
        self.val = basis.eval(rule.points)                      # (nq, nb)
        gref = basis.grad(rule.points)                          # (nq, nb, 2)
        self.grad = np.einsum("eji,qbj->eqbi", inv, gref)       # (ne, nq, nb, 2)
        href = basis.hess(rule.points)                          # (nq, nb, 2, 2)
        self.hess = np.einsum("eki,qbkl,elj->eqbij", inv, href, inv)
        self.lap = self.hess[..., 0, 0] + self.hess[..., 1, 1]  # (ne, nq, nb)


class FaceTables:
    """Traces of basis functions from both sides of every face.

    Side 0 is the element ``face_elems[:, 0]`` (the stored normal points out
    of it); side 1 entries are zero on boundary faces.  Arrays are indexed
    (face, side, quad point, basis).
    """

    def __init__(self, mesh, basis, order):
        rule = quadrature("segment", order)
        t = rule.points
        self.rule = rule
        self.nqf = len(t)
        self.w = mesh.h_face[:, None] * rule.weights[None, :]
        self.x = (mesh.vertices[mesh.face_vertices[:, 0]][:, None, :] * (1 - t)[None, :, None]
                  + mesh.vertices[mesh.face_vertices[:, 1]][:, None, :] * t[None, :, None])

        # six trace configurations: local edge 0..2, flipped or not
        refpts = {}
        for k, (a, b) in enumerate(TRI_EDGES):
            for flip in (0, 1):
                pa, pb = (REF_VERTICES[b], REF_VERTICES[a]) if flip \
                    else (REF_VERTICES[a], REF_VERTICES[b])
                refpts[(k, flip)] = np.outer(1 - t, pa) + np.outer(t, pb)
        cfg_val = np.stack([basis.eval(refpts[(k, f)])
                            for k in range(3) for f in (0, 1)])
        cfg_grad = np.stack([basis.grad(refpts[(k, f)])
                             for k in range(3) for f in (0, 1)])
        cfg_hess = np.stack([basis.hess(refpts[(k, f)])
                             for k in range(3) for f in (0, 1)])

        nf, nb = mesh.n_faces, basis.nb
        _, _, inv, _ = element_geometry(mesh)
        self.val = np.zeros((nf, 2, self.nqf, nb))
        self.grad = np.zeros((nf, 2, self.nqf, nb, 2))
        self.hess = np.zeros((nf, 2, self.nqf, nb, 2, 2))
        for side in (0, 1):
            elems = mesh.face_elems[:, side]
            ok = elems >= 0
            e = elems[ok]
            k = mesh.face_local[ok, side]
            a_loc = (k + 1) % 3  # first vertex of local edge k
            flip = (mesh.elements[e, a_loc] != mesh.face_vertices[ok, 0]).astype(int)
            cfg = 2 * k + flip
            self.val[ok, side] = cfg_val[cfg]
            ge = cfg_grad[cfg]
            self.grad[ok, side] = np.einsum("fji,fqbj->fqbi", inv[e], ge)
            he = cfg_hess[cfg]
            self.hess[ok, side] = np.einsum("fki,fqbkl,flj->fqbij", inv[e], he, inv[e])

        # averaging weights and jump signs per side; boundary side 1 is zero
        bnd = mesh.boundary
        self.avg_w = np.where(bnd[:, None], np.array([1.0, 0.0]),
                              np.array([0.5, 0.5]))
        self.jump_s = np.where(bnd[:, None], np.array([1.0, 0.0]),
                               np.array([1.0, -1.0]))
        self.interior = ~bnd


# -- spaces and functions ------------------------------------------------

def continuous_nodes(mesh, basis):
    """Global Lagrange node identification for a continuous space.

    Shared lattice nodes on faces are matched structurally: vertex nodes by
    mesh vertex id, edge nodes by (face, slot) with the slot counted from the
    face's lower-index vertex.  Returns element node ids, the node count, a
    boundary flag per node and the physical node coordinates.
    """
    p = basis.p
    ne, nv, nf = mesh.n_elements, mesh.n_vertices, mesh.n_faces
    n_edge = max(p - 1, 0)
    n_int = len(basis.interior_slots)
    n_nodes = nv + nf * n_edge + ne * n_int

    node_ids = np.empty((ne, basis.nb), dtype=np.int64)
    for k in range(3):
        node_ids[:, basis.vertex_slots[k]] = mesh.elements[:, k]
    for k in range(3):
        faces = mesh.elem_faces[:, k]
        a = TRI_EDGES[k][0]
        fwd = mesh.elements[:, a] == mesh.face_vertices[faces, 0]
        for slot, m in basis.edge_nodes[k]:
            s_idx = np.where(fwd, m, p - m)
            node_ids[:, slot] = nv + faces * n_edge + (s_idx - 1)
    for c, slot in enumerate(basis.interior_slots):
        node_ids[:, slot] = nv + nf * n_edge + np.arange(ne) * n_int + c

    on_boundary = np.zeros(n_nodes, dtype=bool)
    bfaces = np.nonzero(mesh.boundary)[0]
    on_boundary[mesh.face_vertices[bfaces].ravel()] = True
    for m in range(n_edge):
        on_boundary[nv + bfaces * n_edge + m] = True

    p0, A, _, _ = element_geometry(mesh)
    xn = p0[:, None, :] + np.einsum("eij,bj->ebi", A, basis.nodes)
    node_coords = np.empty((n_nodes, 2))
    node_coords[node_ids.ravel()] = xn.reshape(-1, 2)
    return node_ids, n_nodes, on_boundary, node_coords


class FESpace:
    """Piecewise polynomial space over a mesh.

    s=0 is fully discontinuous; s=1 is the continuous subspace with zero
    trace on the domain boundary.
    """

    def __init__(self, mesh, s, p):
        if s not in (0, 1):
            raise ValueError("s must be 0 (DG) or 1 (C0)")
        if p < 2:
            raise ValueError("polynomial degree must be at least 2")
        self.mesh = mesh
        self.s = s
        self.p = p
        self.basis = ReferenceBasis(p)
        nb = self.basis.nb
        ne = mesh.n_elements
        if s == 0:
            self.element_dofs = np.arange(ne * nb, dtype=np.int64).reshape(ne, nb)
            self.ndofs = ne * nb
        else:
            self._build_continuous()
        self._cache = {}

    def _build_continuous(self):
        node_ids, n_nodes, on_boundary, node_coords = continuous_nodes(
            self.mesh, self.basis)
        node_dof = np.full(n_nodes, -1, dtype=np.int64)
        free = np.nonzero(~on_boundary)[0]
        node_dof[free] = np.arange(len(free))
        self.node_ids = node_ids
        self.node_on_boundary = on_boundary
        self.node_dof = node_dof
        self.node_of_dof = free
        self.node_coords = node_coords
        self.n_nodes = n_nodes
        self.element_dofs = node_dof[node_ids]
        self.ndofs = len(free)

    def function(self, coeffs=None):
        if coeffs is None:
            coeffs = np.zeros(self.ndofs)
        return FEFunction(self, np.asarray(coeffs, dtype=float))

    def local_coeffs(self, coeffs):
        """Per-element coefficient gather, zero at constrained slots."""
        dofs = self.element_dofs
        return np.where(dofs >= 0, coeffs[np.clip(dofs, 0, None)], 0.0)

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

    def face_dof_stack(self):
        """Dof ids per face in stacked slot order (side0 then side1)."""
        key = ("fdofs",)
        if key not in self._cache:
            fd = np.full((self.mesh.n_faces, 2, self.basis.nb), -1, dtype=np.int64)
            for side in (0, 1):
                ok = self.mesh.face_elems[:, side] >= 0
                fd[ok, side] = self.element_dofs[self.mesh.face_elems[ok, side]]
            self._cache[key] = fd.reshape(self.mesh.n_faces, -1)
        return self._cache[key]

    @property
    def quad_order(self):
        return 2 * self.p

    @property
    def face_quad_order(self):
        return 2 * self.p + 1


class FEFunction:
    """Member of an FESpace: one coefficient per global degree of freedom."""

    def __init__(self, space, coeffs):
        if len(coeffs) != space.ndofs:
            raise ValueError("coefficient vector has wrong length")
        self.space = space
        self.coeffs = coeffs

    def local_coeffs(self):
        return self.space.local_coeffs(self.coeffs)

    def __add__(self, other):
        self._check(other)
        return FEFunction(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return FEFunction(self.space, self.coeffs - other.coeffs)

    def __rmul__(self, a):
        return FEFunction(self.space, float(a) * self.coeffs)

    def _check(self, other):
        if other.space is not self.space:
            raise ValueError("functions live in different spaces")


def eval_function(v, elem, ref_points):
    """Values, gradients and Hessians of ``v`` on one element.

    ``ref_points`` are coordinates on the reference triangle; derivatives are
    returned in physical coordinates and the Hessian is symmetric.
    """
    space = v.space
    basis = space.basis
    _, _, inv, _ = element_geometry(space.mesh)
    c = space.local_coeffs(v.coeffs)[elem]
    pts = np.atleast_2d(ref_points)
    vals = basis.eval(pts) @ c
    gref = np.einsum("qbi,b->qi", basis.grad(pts), c)
    grads = np.einsum("ji,qj->qi", inv[elem], gref)
    href = np.einsum("qbij,b->qij", basis.hess(pts), c)
    hess = np.einsum("ki,qkl,lj->qij", inv[elem], href, inv[elem])
    return vals, grads, hess


def face_jump_avg(v, face, t_params):
    """Jump and average of value and gradient on a face.

    ``t_params`` parameterize the face from its lower-index vertex to the
    higher one.  The jump sign follows the stored face normal: trace from
    the element the normal points out of, minus the other trace.  On a
    boundary face jump and average both equal the single trace.
    """
    mesh = v.space.mesh
    t = np.atleast_1d(np.asarray(t_params, dtype=float))
    vals = np.zeros((2, len(t)))
    grads = np.zeros((2, len(t), 2))
    for side in (0, 1):
        e = mesh.face_elems[face, side]
        if e < 0:
            continue
        k = mesh.face_local[face, side]
        a, b = TRI_EDGES[k]
        if mesh.elements[e, a] == mesh.face_vertices[face, 0]:
            ref = np.outer(1 - t, REF_VERTICES[a]) + np.outer(t, REF_VERTICES[b])
        else:
            ref = np.outer(1 - t, REF_VERTICES[b]) + np.outer(t, REF_VERTICES[a])
        vv, gg, _ = eval_function(v, e, ref)
        vals[side] = vv
        grads[side] = gg
    if mesh.boundary[face]:
        return vals[0], vals[0], grads[0], grads[0]
    return (vals[0] - vals[1], 0.5 * (vals[0] + vals[1]),
            grads[0] - grads[1], 0.5 * (grads[0] + grads[1]))


def function_values(v, tables):
    """Values, gradients, Hessians of ``v`` at the quadrature points of
    ``tables`` (an ElementTables); shapes (ne,nq), (ne,nq,2), (ne,nq,2,2)."""
    c = v.local_coeffs()
    ne, nb = c.shape
    nq = tables.nq
    vals = c @ tables.val.T
    cb = c[:, None, None, :]
    grads = np.matmul(cb, tables.grad.reshape(ne, nq, nb, 2))[:, :, 0, :]
    hess = np.matmul(cb, tables.hess.reshape(ne, nq, nb, 4))[:, :, 0, :]
    return vals, grads, hess.reshape(ne, nq, 2, 2)


def face_values(v, ftab):
    """Traces of value and gradient on each face side; (nf,2,nqf[,2])."""
    mesh = v.space.mesh
    c = v.local_coeffs()
    cf = np.zeros((mesh.n_faces, 2, c.shape[1]))
    for side in (0, 1):
        ok = mesh.face_elems[:, side] >= 0
        cf[ok, side] = c[mesh.face_elems[ok, side]]
    vals = np.einsum("fsb,fsqb->fsq", cf, ftab.val)
    grads = np.einsum("fsb,fsqbi->fsqi", cf, ftab.grad)
    return vals, grads


def jump_integrals(v, ftab):
    """Per-face integrals h^-1 int |[grad v]|^2 (interior faces only) and
    h^-3 int |[v]|^2 (all faces).

    On the continuous zero-trace space the value jumps vanish structurally
    and are returned as exact zeros rather than h^-3-amplified roundoff.
    """
    mesh = v.space.mesh
    vals, grads = face_values(v, ftab)
    h = mesh.h_face
    if v.space.s == 1:
        int_v = np.zeros(mesh.n_faces)
    else:
        jv = np.einsum("fs,fsq->fq", ftab.jump_s, vals)
        int_v = np.einsum("fq,fq->f", ftab.w, jv ** 2) / h ** 3
    jg = np.einsum("fs,fsqi->fqi", ftab.jump_s, grads)
    int_g = np.einsum("fq,fq->f", ftab.w, np.einsum("fqi,fqi->fq", jg, jg)) / h
    int_g = np.where(ftab.interior, int_g, 0.0)
    return int_g, int_v


def norms(v, lam=0.0, quad_order=None, face_quad_order=None):
    """The mesh-dependent norm, jump seminorm and lambda-weighted seminorm.

    ||v||_T^2 = int(|D2 v|^2 + |grad v|^2 + v^2) + |v|_J^2 with
    |v|_J^2 = sum_int h^-1 int |[grad v]|^2 + sum_all h^-3 int |[v]|^2, and
    |v|_{lam}^2 = int(|D2 v|^2 + 2 lam |grad v|^2 + lam^2 v^2).
    """
    space = v.space
    etab = space.element_tables(quad_order or space.quad_order)
    ftab = space.face_tables(face_quad_order or space.face_quad_order)
    vals, grads, hess = function_values(v, etab)
    h2 = np.einsum("eq,eqij,eqij->", etab.w, hess, hess)
    g2 = np.einsum("eq,eqi,eqi->", etab.w, grads, grads)
    v2 = np.einsum("eq,eq->", etab.w, vals ** 2)
    int_g, int_v = jump_integrals(v, ftab)
    jump_sq = int_g.sum() + int_v.sum()
    norm_T = np.sqrt(h2 + g2 + v2 + jump_sq)
    lam_semi = np.sqrt(h2 + 2.0 * lam * g2 + lam ** 2 * v2)
    return norm_T, np.sqrt(jump_sq), lam_semi


def interpolate(f, space):
    """Lagrange nodal interpolation of a callable f(x) with x of shape (n, 2).

    Exactly reproduces polynomials of degree <= p.  For s=1 the boundary
    nodes are constrained to zero, so f should vanish on the boundary for
    exact reproduction there.
    """
    if space.s == 1:
        vals = f(space.node_coords[space.node_of_dof])
        return space.function(np.asarray(vals, dtype=float))
    p0, A, _, _ = element_geometry(space.mesh)
    xn = p0[:, None, :] + np.einsum("eij,bj->ebi", A, space.basis.nodes)
    vals = f(xn.reshape(-1, 2))
    return space.function(np.asarray(vals, dtype=float))


def transfer(u, new_space):
    """Exact re-interpolation of ``u`` onto a refinement of its mesh.

    The new mesh must carry a parent map into u's mesh (as produced by
    refine/uniform_refine); bisection children are nested in their parent,
    so nodal re-interpolation reproduces u exactly.
    """
    old_space = u.space
    new_mesh = new_space.mesh
    par = new_mesh.parent
    if par.min() < 0:
        raise ValueError("target mesh has no parent map into the source mesh")
    p0n, An, _, _ = element_geometry(new_mesh)
    xn = p0n[:, None, :] + np.einsum("eij,bj->ebi", An, new_space.basis.nodes)
    p0o, _, invo, _ = element_geometry(old_space.mesh)
    xi = np.einsum("eij,ebj->ebi", invo[par], xn - p0o[par][:, None, :])
    nbn = new_space.basis.nb
    phi = old_space.basis.eval(xi.reshape(-1, 2)).reshape(len(par), nbn, -1)
    c_old = old_space.local_coeffs(u.coeffs)
    vals = np.einsum("enb,eb->en", phi, c_old[par])
    if new_space.s == 0:
        return new_space.function(vals.ravel())
    node_vals = np.zeros(new_space.n_nodes)
    node_vals[new_space.node_ids.ravel()] = vals.ravel()
    return new_space.function(node_vals[new_space.node_of_dof])
