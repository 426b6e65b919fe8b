"""Discrete forms: face liftings, lifted Laplacian, stabilization and jump
penalization, the vector-field bilinear form, the nonlinear form's residual
and its control-frozen linearization.

Bilinear forms that do not depend on the iterate (stabilization,
penalization) are assembled once per space into sparse matrices and cached;
the nonlinear part is re-assembled at each frozen-control selection.

Matrix convention: entry (i, j) multiplies trial coefficient j and test
coefficient i, so b(w, v) = v . (B w).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fespace import FaceTables, ReferenceBasis, element_geometry, function_values
from .problem import evaluate_payoff, gamma, infsup_from_table, sup_with_ties
from .quadrature import quadrature


@dataclass
class MethodParams:
    """Parameters selecting one member of the method family.

    s selects the space (0 discontinuous, 1 continuous with zero trace),
    theta weights the stabilization, chi enables the face lifting inside the
    test operator, sigma and rho scale the gradient- and value-jump
    penalties, lam is the zeroth-order shift.  q is the lifting degree.
    """
    s: int = 0
    p: int = 2
    q: int = None
    theta: float = 0.5
    chi: int = 0
    sigma: float = None
    rho: float = None
    lam: float = 0.0

    def __post_init__(self):
        if self.q is None:
            self.q = self.p - 2
        if self.sigma is None:
            self.sigma = 10.0 * self.p ** 2
        if self.rho is None:
            self.rho = 10.0 * self.p ** 4
        if self.s not in (0, 1):
            raise ValueError("s must be 0 or 1")
        if self.p < 2:
            raise ValueError("p must be at least 2")
        if self.q < self.p - 2:
            raise ValueError("lifting degree q must be at least p - 2")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.chi not in (0, 1):
            raise ValueError("chi must be 0 or 1")
        if self.sigma < 0 or self.rho < 0:
            raise ValueError("penalty parameters must be nonnegative")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")


@dataclass
class FrozenControls:
    """Optimal control indices per element quadrature point."""
    alpha: np.ndarray  # (ne, nq) int
    beta: np.ndarray   # (ne, nq) int


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray


# -- stacked face traces ---------------------------------------------------

class _FaceStacks:
    """Per-face trace arrays with the two sides stacked into one slot axis.

    Slot s*nb+b is basis function b of side s; boundary faces have zero
    side-1 entries.  JMP carries the jump signs, AVG the averaging weights
    (single trace on boundary faces).
    """

    def __init__(self, space):
        ftab = space.face_tables(space.face_quad_order)
        mesh = space.mesh
        nf, nqf, nb = mesh.n_faces, ftab.nqf, space.basis.nb
        n, t = mesh.face_normal, mesh.face_tangent

        def stack(arr):  # (nf, 2, nqf, nb) -> (nf, nqf, 2 nb)
            return arr.transpose(0, 2, 1, 3).reshape(nf, nqf, 2 * nb)

        self.V = stack(ftab.val)
        self.Gn = stack(np.einsum("fi,fsqbi->fsqb", n, ftab.grad))
        self.Gt = stack(np.einsum("fi,fsqbi->fsqb", t, ftab.grad))
        self.Gx = stack(ftab.grad[..., 0])
        self.Gy = stack(ftab.grad[..., 1])
        self.Htn = stack(np.einsum("fi,fsqbij,fj->fsqb", t, ftab.hess, n))
        self.Htt = stack(np.einsum("fi,fsqbij,fj->fsqb", t, ftab.hess, t))
        self.AVG = np.repeat(ftab.avg_w, nb, axis=1)   # (nf, 2 nb)
        self.JMP = np.repeat(ftab.jump_s, nb, axis=1)
        self.w = ftab.w
        self.interior = ftab.interior
        self.h = mesh.h_face
        self.dofs = space.face_dof_stack()

    def avg(self, arr):
        return arr * self.AVG[:, None, :]

    def jump(self, arr):
        return arr * self.JMP[:, None, :]


def _face_stacks(space):
    key = ("face_stacks",)
    if key not in space._cache:
        space._cache[key] = _FaceStacks(space)
    return space._cache[key]


def _scatter_blocks(blocks, rows, cols, ndofs):
    """COO triplets from dense blocks; constrained (-1) dofs are dropped."""
    r = np.broadcast_to(rows[:, :, None], blocks.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], blocks.shape).ravel()
    v = blocks.ravel()
    keep = (r >= 0) & (c >= 0)
    return v[keep], r[keep], c[keep]


def _to_csr(triplets, ndofs):
    vals = np.concatenate([t[0] for t in triplets])
    rows = np.concatenate([t[1] for t in triplets])
    cols = np.concatenate([t[2] for t in triplets])
    return sp.coo_matrix((vals, (rows, cols)), shape=(ndofs, ndofs)).tocsr()


def _volume_matrices(space):
    key = ("vol_mats",)
    if key in space._cache:
        return space._cache[key]
    etab = space.element_tables(space.quad_order)
    w = etab.w
    dofs = space.element_dofs
    nd = space.ndofs

    def emit(test, trial):
        if test.ndim == 2:  # (nq, nb) shared value table
            blocks = np.einsum("eq,qi,eqj->eij", w, test, trial) \
                if trial.ndim == 3 else np.einsum("eq,qi,qj->eij", w, test, trial)
        elif trial.ndim == 2:
            blocks = np.einsum("eq,eqi,qj->eij", w, test, trial)
        else:
            blocks = np.einsum("eq,eqi,eqj->eij", w, test, trial)
        return _to_csr([_scatter_blocks(blocks, dofs, dofs, nd)], nd)

    H2 = _to_csr([_scatter_blocks(
        np.einsum("eq,eqikl,eqjkl->eij", w, etab.hess, etab.hess),
        dofs, dofs, nd)], nd)
    mats = {
        "H2": H2,
        "DD": emit(etab.lap, etab.lap),
        "G1": _to_csr([_scatter_blocks(
            np.einsum("eq,eqik,eqjk->eij", w, etab.grad, etab.grad),
            dofs, dofs, nd)], nd),
        "M0": emit(etab.val, etab.val),
    }
    space._cache[key] = mats
    return mats


def _face_matrices(space):
    key = ("face_mats",)
    if key in space._cache:
        return space._cache[key]
    st = _face_stacks(space)
    nd = space.ndofs
    w = st.w
    w_int = np.where(st.interior[:, None], w, 0.0)

    def emit(weight, test, trial, symmetrize=True):
        blocks = np.matmul((test * weight[:, :, None]).transpose(0, 2, 1), trial)
        if symmetrize:
            blocks = blocks + blocks.transpose(0, 2, 1)
        return _to_csr([_scatter_blocks(blocks, st.dofs, st.dofs, nd)], nd)

    FS = emit(w, st.jump(st.Gt), -st.avg(st.Htn))
    FS = FS + emit(w_int, st.jump(st.Gn), st.avg(st.Htt))
    JgI = emit(w_int / st.h[:, None], st.jump(st.Gx), st.jump(st.Gx), False) \
        + emit(w_int / st.h[:, None], st.jump(st.Gy), st.jump(st.Gy), False)
    JgB = emit((w - w_int) / st.h[:, None], st.jump(st.Gt), st.jump(st.Gt), False)
    if space.s == 1:
        # value jumps vanish structurally on the continuous zero-trace
        # space; assembling them would inject h^-3-amplified roundoff
        zero = sp.csr_matrix((nd, nd))
        Jv, FL1 = zero, zero
    else:
        Jv = emit(w / st.h[:, None] ** 3, st.jump(st.V), st.jump(st.V), False)
        FL1 = emit(w, st.jump(st.V), st.avg(st.Gn))
    FL2 = emit(w_int, st.jump(st.Gn), st.avg(st.V))
    mats = {"FS": FS, "JgI": JgI, "JgB": JgB, "Jv": Jv,
            "FL1": FL1, "FL2": FL2}
    space._cache[key] = mats
    return mats


def stabilization_matrix(space):
    """Matrix of S_T: volume D2:D2 - Lap Lap plus its two face groups."""
    key = ("S_mat",)
    if key not in space._cache:
        vol = _volume_matrices(space)
        fm = _face_matrices(space)
        space._cache[key] = (vol["H2"] - vol["DD"] + fm["FS"]).tocsr()
    return space._cache[key]


def bstar_matrix(space, lam):
    key = ("B_mat", float(lam))
    if key not in space._cache:
        vol = _volume_matrices(space)
        fm = _face_matrices(space)
        B = vol["H2"] + 2.0 * lam * vol["G1"] + lam ** 2 * vol["M0"] \
            + fm["FS"] - lam * (fm["FL1"] + fm["FL2"])
        space._cache[key] = B.tocsr()
    return space._cache[key]


def penalty_matrix(space, sigma, rho):
    if sigma < 0 or rho < 0:
        raise ValueError("penalty parameters must be nonnegative")
    fm = _face_matrices(space)
    return (sigma * (fm["JgI"] + fm["JgB"]) + rho * fm["Jv"]).tocsr()


def jump_seminorm_matrix(space):
    """Gram matrix of |.|_J^2: interior gradient jumps and all value jumps."""
    fm = _face_matrices(space)
    return (fm["JgI"] + fm["Jv"]).tocsr()


def S_T(w, v):
    """Stabilization bilinear form S_T(w, v)."""
    return float(v.coeffs @ (stabilization_matrix(w.space) @ w.coeffs))


def B_star(w, v, lam):
    """The stabilization form of the original DGFEM formulation."""
    return float(v.coeffs @ (bstar_matrix(w.space, lam) @ w.coeffs))


def J_T(w, v, sigma, rho):
    """Jump penalization: sigma-weighted gradient jumps (tangential only on
    the boundary) and rho-weighted value jumps."""
    if sigma <= 0 or rho <= 0:
        raise ValueError("penalty parameters must be positive")
    return float(v.coeffs @ (penalty_matrix(w.space, sigma, rho) @ w.coeffs))


def stab_plus_penalty(space, params):
    key = ("SJ_mat", params.theta, params.sigma, params.rho)
    if key not in space._cache:
        space._cache[key] = (params.theta * stabilization_matrix(space)
                             + penalty_matrix(space, params.sigma, params.rho)).tocsr()
    return space._cache[key]


# -- face lifting ----------------------------------------------------------

class FaceLifting:
    """r_T^F(w): piecewise degree-q polynomial on the two adjacent elements."""

    def __init__(self, space, face, coeffs, basis):
        self.space = space
        self.face = face
        self.elems = space.mesh.face_elems[face]
        self.coeffs = coeffs  # (2, nbq)
        self.basis = basis

    def eval(self, side, ref_points):
        return self.basis.eval(np.atleast_2d(ref_points)) @ self.coeffs[side]


def _lift_tables(space, q):
    """Cached q-degree machinery: reference mass inverse, traces, volumes."""
    key = ("lift", q)
    if key in space._cache:
        return space._cache[key]
    mesh = space.mesh
    basis = ReferenceBasis(q)
    rule = quadrature("triangle", 2 * q)
    val = basis.eval(rule.points)
    Mref = np.einsum("q,qm,qn->mn", rule.weights, val, val)
    Minv = np.linalg.inv(Mref)
    ftab = FaceTables(mesh, basis, space.face_quad_order)
    evals = basis.eval(space.element_tables(space.quad_order).rule.points)
    tables = {"basis": basis, "Minv": Minv, "traces": ftab.val,
              "qvol": evals}
    space._cache[key] = tables
    return tables


def lift_face(space, face, w, q):
    """Lifting of a face function: int r phi = int_F w {phi} for all
    piecewise polynomials phi of degree at most q."""
    mesh = space.mesh
    if mesh.boundary[face]:
        raise ValueError("lifting is defined on interior faces only")
    lt = _lift_tables(space, q)
    ftab = space.face_tables(space.face_quad_order)
    x = ftab.x[face]
    wvals = np.asarray(w(x), dtype=float) if callable(w) else np.asarray(w, dtype=float)
    _, _, _, det = element_geometry(mesh)
    coeffs = np.empty((2, lt["basis"].nb))
    for side in (0, 1):
        e = mesh.face_elems[face, side]
        c = 0.5 * np.einsum("q,q,qm->m", ftab.w[face], wvals,
                            lt["traces"][face, side])
        coeffs[side] = lt["Minv"] @ c / det[e]
    return FaceLifting(space, face, coeffs, lt["basis"])


def _lifting_accumulate(space, q, face_func, out):
    """Add sum_F r_T^F(face_func) evaluated at element quadrature points.

    face_func is (nf, nqf) of jump data; only interior faces contribute.
    """
    mesh = space.mesh
    lt = _lift_tables(space, q)
    ftab = space.face_tables(space.face_quad_order)
    _, _, _, det = element_geometry(mesh)
    interior = np.nonzero(~mesh.boundary)[0]
    c = 0.5 * np.einsum("fq,fq,fsqm->fsm", ftab.w[interior],
                        face_func[interior], lt["traces"][interior])
    rc = np.einsum("mn,fsn->fsm", lt["Minv"], c) \
        / det[mesh.face_elems[interior]][:, :, None]
    vals = np.einsum("qm,fsm->fsq", lt["qvol"], rc)
    for side in (0, 1):
        np.add.at(out, mesh.face_elems[interior, side], vals[:, side])
    return out


def normal_gradient_jumps(v, ftab=None):
    """[grad v . n] at face quadrature points; zero on boundary faces."""
    space = v.space
    if ftab is None:
        ftab = space.face_tables(space.face_quad_order)
    c = space.local_coeffs(v.coeffs)
    mesh = space.mesh
    cf = np.zeros((mesh.n_faces, 2, c.shape[1]))
    for side in (0, 1):
        ok = mesh.face_elems[:, side] >= 0
        cf[ok, side] = c[mesh.face_elems[ok, side]]
    grads = np.einsum("fsb,fsqbi->fsqi", cf, ftab.grad)
    jg = np.einsum("fs,fsqi->fqi", ftab.jump_s, grads)
    gn = np.einsum("fqi,fi->fq", jg, mesh.face_normal)
    gn[mesh.boundary] = 0.0
    return gn


def lifted_laplacian(v, params):
    """Values of the (possibly lifted) Laplacian at element quadrature points.

    chi = 0 yields the piecewise Laplacian; chi = 1 subtracts the lifting of
    the normal-gradient jumps.
    """
    space = v.space
    etab = space.element_tables(space.quad_order)
    c = v.local_coeffs()
    lap = np.einsum("eb,eqb->eq", c, etab.lap)
    if params.chi:
        gj = normal_gradient_jumps(v)
        lift = np.zeros_like(lap)
        _lifting_accumulate(space, params.q, gj, lift)
        lap = lap - lift
    return lap


# -- vector-field bilinear form ---------------------------------------------

def C_T(wf, vf):
    """Bilinear form on piecewise polynomial vector fields whose restriction
    to piecewise gradients reproduces S_T; the curl terms vanish there."""
    space = wf.space
    if vf.space is not space:
        raise ValueError("vector fields live on different spaces")
    etab = space.element_tables(space.quad_order)
    mesh = space.mesh

    def volume_jac(field):
        return np.einsum("ebc,eqbd->eqcd", field.coeffs, etab.grad)

    Jw = volume_jac(wf)
    Jv = volume_jac(vf)
    div_w = Jw[..., 0, 0] + Jw[..., 1, 1]
    div_v = Jv[..., 0, 0] + Jv[..., 1, 1]
    curl_w = Jw[..., 1, 0] - Jw[..., 0, 1]
    curl_v = Jv[..., 1, 0] - Jv[..., 0, 1]
    total = np.einsum("eq,eqcd,eqcd->", etab.w, Jw, Jv) \
        - np.einsum("eq,eq,eq->", etab.w, div_w, div_v) \
        - np.einsum("eq,eq,eq->", etab.w, curl_w, curl_v)

    ftab = space.face_tables(space.face_quad_order)
    n, t = mesh.face_normal, mesh.face_tangent

    def face_traces(field):
        cf = np.zeros((mesh.n_faces, 2) + field.coeffs.shape[1:])
        for side in (0, 1):
            ok = mesh.face_elems[:, side] >= 0
            cf[ok, side] = field.coeffs[mesh.face_elems[ok, side]]
        vals = np.einsum("fsbc,fsqb->fsqc", cf, ftab.val)
        jac = np.einsum("fsbc,fsqbd->fsqcd", cf, ftab.grad)
        wn = np.einsum("fsqc,fc->fsq", vals, n)
        wt = np.einsum("fsqc,fc->fsq", vals, t)
        # d/dt (w.n) and d/dt (w.t) along the face
        dtn = np.einsum("fc,fsqcd,fd->fsq", n, jac, t)
        dtt = np.einsum("fc,fsqcd,fd->fsq", t, jac, t)
        return wn, wt, dtn, dtt

    wn_w, wt_w, dtn_w, dtt_w = face_traces(wf)
    wn_v, wt_v, dtn_v, dtt_v = face_traces(vf)
    aw, js = ftab.avg_w, ftab.jump_s

    def avg(x):
        return np.einsum("fs,fsq->fq", aw, x)

    def jmp(x):
        return np.einsum("fs,fsq->fq", js, x)

    wq = ftab.w
    wq_int = np.where(ftab.interior[:, None], wq, 0.0)
    total -= np.einsum("fq,fq,fq->", wq, avg(dtn_w), jmp(wt_v))
    total -= np.einsum("fq,fq,fq->", wq, avg(dtn_v), jmp(wt_w))
    total += np.einsum("fq,fq,fq->", wq_int, avg(dtt_w), jmp(wn_v))
    total += np.einsum("fq,fq,fq->", wq_int, avg(dtt_v), jmp(wn_w))
    return float(total)


def stability_parameters(nu, theta):
    """Geometry-robust monotonicity window for theta and its margin.

    For a Cordes constant nu the admissible interval is
    ((1 - sqrt(nu))/2, (1 + sqrt(nu))/2), and inside it
    mu = theta - (1 - nu) / (4 (1 - theta)) is positive.
    """
    if not 0.0 < nu <= 1.0:
        raise ValueError("nu must lie in (0, 1]")
    root = np.sqrt(nu)
    lo, hi = 0.5 * (1.0 - root), 0.5 * (1.0 + root)
    mu = -np.inf if theta >= 1.0 else theta - (1.0 - nu) / (4.0 * (1.0 - theta))
    return lo, hi, mu


# -- nonlinear form ---------------------------------------------------------

def select_controls(w, problem, grid, alpha_field=None, quad_order=None,
                    chunk_bytes=2 ** 26):
    """Optimal control indices and renormalized operator values at the
    element quadrature points of w's space.

    With alpha_field given (per-point alpha indices), only the sup over beta
    is taken; otherwise the full inf-sup.  Ties break to the lowest index.
    """
    space = w.space
    etab = space.element_tables(quad_order or space.quad_order)
    vals, grads, hess = function_values(w, etab)
    ne, nq = vals.shape
    x = etab.x.reshape(-1, 2)
    M = hess.reshape(-1, 2, 2)
    g = grads.reshape(-1, 2)
    u = vals.reshape(-1)
    n = ne * nq
    F = np.empty(n)
    ai = np.empty(n, dtype=np.int64)
    bi = np.empty(n, dtype=np.int64)
    af = None if alpha_field is None else alpha_field.reshape(-1)
    step = max(1, chunk_bytes // (8 * grid.n_alpha * grid.n_beta))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        table = evaluate_payoff(problem, grid, x[lo:hi], M[lo:hi],
                                g[lo:hi], u[lo:hi])
        if af is None:
            F[lo:hi], ai[lo:hi], bi[lo:hi] = infsup_from_table(table)
        else:
            rows = table[np.arange(hi - lo), af[lo:hi]]
            F[lo:hi], bi[lo:hi] = sup_with_ties(rows)
            ai[lo:hi] = af[lo:hi]
    shape = (ne, nq)
    return F.reshape(shape), FrozenControls(ai.reshape(shape), bi.reshape(shape))


def _frozen_coefficients(problem, grid, fc, x):
    """gamma, a, b, c, gamma*f at points x for per-point frozen controls."""
    n = len(x)
    if problem.frozen is not None:
        return problem.frozen(grid, fc, x)
    pair = fc.alpha.reshape(-1) * grid.n_beta + fc.beta.reshape(-1)
    order = np.argsort(pair, kind="stable")
    sorted_pair = pair[order]
    gam = np.empty(n)
    a = np.empty((n, 2, 2))
    b = np.zeros((n, 2))
    c = np.zeros(n)
    gf = np.empty(n)
    lo = 0
    while lo < n:
        hi = lo + np.searchsorted(sorted_pair[lo:], sorted_pair[lo], side="right")
        idx = order[lo:hi]
        ia, ib = divmod(int(sorted_pair[lo]), grid.n_beta)
        al, bt = grid.alphas[ia], grid.betas[ib]
        xg = x[idx]
        gam[idx] = gamma(problem, xg, al, bt)
        a[idx] = problem.a(xg, al, bt)
        if problem.b is not None:
            b[idx] = problem.b(xg, al, bt)
        if problem.c is not None:
            c[idx] = problem.c(xg, al, bt)
        gf[idx] = gam[idx] * problem.f(xg, al, bt)
        lo = hi
    return gam, a, b, c, gf


def A_T_residual(w, problem, grid, params, return_controls=True):
    """Residual vector r_i = A_T(w; phi_i), with the control selection at w.

    The nonlinear term tests the renormalized operator against the (possibly
    lifted) test operator; the stabilization and penalty rows are linear.
    """
    space = w.space
    etab = space.element_tables(space.quad_order)
    F, fc = select_controls(w, problem, grid)
    lam = params.lam
    Lphi = etab.lap - lam * etab.val[None, :, :]
    r_local = np.einsum("eq,eqb->eb", etab.w * F, Lphi)
    r = np.zeros(space.ndofs)
    dofs = space.element_dofs
    ok = dofs >= 0
    np.add.at(r, dofs[ok], r_local[ok])
    if params.chi:
        r += _chi_residual_rows(space, params.q, etab.w * F)
    r += stab_plus_penalty(space, params) @ w.coeffs
    if return_controls:
        return r, fc
    return r


def _lift_projection(space, q):
    """Z[f, s, m, i]: mass-solved face data of test normal-gradient jumps.

    For interior face F and adjacent element E on side s, the lifting of
    [grad phi_i . n] restricted to E has coefficients Z[f, s, :, i] in the
    degree-q basis.
    """
    key = ("liftZ", q)
    if key in space._cache:
        return space._cache[key]
    mesh = space.mesh
    lt = _lift_tables(space, q)
    st = _face_stacks(space)
    ftab = space.face_tables(space.face_quad_order)
    _, _, _, det = element_geometry(mesh)
    jmpGn = st.jump(st.Gn)  # (nf, nqf, 2nb)
    c = 0.5 * np.einsum("fq,fqm,fqi->fmi", ftab.w, lt["traces"][:, 0], jmpGn)
    c1 = 0.5 * np.einsum("fq,fqm,fqi->fmi", ftab.w, lt["traces"][:, 1], jmpGn)
    Z = np.stack([c, c1], axis=1)
    Z = np.einsum("mn,fsni->fsmi", lt["Minv"], Z)
    e = np.where(mesh.face_elems >= 0, mesh.face_elems, 0)
    Z /= det[e][:, :, None, None]
    Z[mesh.boundary] = 0.0
    space._cache[key] = Z
    return Z


def _chi_residual_rows(space, q, wF):
    """Rows -int F r_T([grad phi_i . n]) for the residual; wF = weights*F."""
    lt = _lift_tables(space, q)
    Z = _lift_projection(space, q)
    mesh = space.mesh
    bF = np.einsum("eq,qm->em", wF, lt["qvol"])  # int_E F psi_m
    e = np.where(mesh.face_elems >= 0, mesh.face_elems, 0)
    rows_f = -np.einsum("fsmi,fsm->fi", Z, bF[e])
    r = np.zeros(space.ndofs)
    fd = space.face_dof_stack()
    ok = fd >= 0
    np.add.at(r, fd[ok], rows_f[ok])
    return r


def assemble_linearized(fc, w_space, problem, grid, params):
    """Sparse system of the linearization at frozen controls.

    Matrix rows are int gamma (a : D2 phi_j + b . grad phi_j - c phi_j)
    L_T phi_i plus theta S + J; the right-hand side is int gamma f L_T phi_i.
    """
    space = w_space
    etab = space.element_tables(space.quad_order)
    x = etab.x.reshape(-1, 2)
    gam, a, b, c, gf = _frozen_coefficients(problem, grid, fc, x)
    ne, nq = etab.w.shape
    nb = space.basis.nb
    gam = gam.reshape(ne, nq)
    a = a.reshape(ne, nq, 2, 2)
    b = b.reshape(ne, nq, 2)
    c = c.reshape(ne, nq)
    gf = gf.reshape(ne, nq)

    col = np.matmul(etab.hess.reshape(ne, nq, nb, 4),
                    a.reshape(ne, nq, 4, 1))[..., 0]
    if problem.b is not None:
        col += np.einsum("eqi,eqbi->eqb", b, etab.grad)
    if problem.c is not None:
        col -= c[:, :, None] * etab.val[None, :, :]
    lam = params.lam
    row = etab.lap - lam * etab.val[None, :, :]
    wgam = etab.w * gam
    blocks = np.matmul((row * wgam[:, :, None]).transpose(0, 2, 1), col)
    dofs = space.element_dofs
    triplets = [_scatter_blocks(blocks, dofs, dofs, space.ndofs)]

    rhs = np.zeros(space.ndofs)
    r_local = np.einsum("eq,eqi->ei", etab.w * gf, row)
    ok = dofs >= 0
    np.add.at(rhs, dofs[ok], r_local[ok])

    if params.chi:
        triplets.append(_chi_matrix_triplets(space, params.q, wgam, col))
        rhs += _chi_residual_rows(space, params.q, etab.w * gf)

    M = _to_csr(triplets, space.ndofs) + stab_plus_penalty(space, params)
    return SparseSystem(M.tocsr(), rhs)


def _chi_matrix_triplets(space, q, wgam, col):
    """-int gamma (L phi_j) r_T([grad phi_i . n]) as face blocks."""
    lt = _lift_tables(space, q)
    Z = _lift_projection(space, q)
    mesh = space.mesh
    # D[e, m, b] = int_E gamma (L phi_b) psi_m
    D = np.einsum("eq,qm,eqb->emb", wgam, lt["qvol"], col)
    e = np.where(mesh.face_elems >= 0, mesh.face_elems, 0)
    Df = D[e]  # (nf, 2, nbq, nb)
    nf = mesh.n_faces
    nb = space.basis.nb
    blocks = np.zeros((nf, 2 * nb, 2 * nb))
    for s in (0, 1):
        blk = -np.einsum("fmi,fmb->fib", Z[:, s], Df[:, s])
        blocks[:, :, s * nb:(s + 1) * nb] += blk
    fd = space.face_dof_stack()
    return _scatter_blocks(blocks, fd, fd, space.ndofs)
