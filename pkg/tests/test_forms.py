import numpy as np
import pytest

from hjbfem.benchmarks import pentagon_problem, square_smooth_hjb
from hjbfem.conformity import VectorFieldSpace, gradient_field
from hjbfem.fespace import FESpace, interpolate, norms, function_values
from hjbfem.forms import (A_T_residual, B_star, C_T, J_T, MethodParams, S_T,
                          assemble_linearized, lift_face, lifted_laplacian,
                          penalty_matrix, select_controls,
                          stabilization_matrix)
from hjbfem.mesh import build_mesh, refine, uniform_refine
from hjbfem.quadrature import quadrature
from tests.test_problem import const_problem


def square_mesh():
    return build_mesh([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
                      [(0, 1, 2), (0, 2, 3)])


def bubble(x):
    return x[:, 0] * (1 - x[:, 0]) * x[:, 1] * (1 - x[:, 1])


def diag_face(mesh):
    return int(np.nonzero(~mesh.boundary)[0][0])


def random_fn(space, seed):
    rng = np.random.default_rng(seed)
    return space.function(rng.standard_normal(space.ndofs))


# -- lifting ---------------------------------------------------------------

def test_lift_constant_on_diagonal():
    mesh = square_mesh()
    space = FESpace(mesh, 0, 2)
    lift = lift_face(space, diag_face(mesh), lambda x: np.ones(len(x)), q=0)
    for side in (0, 1):
        vals = lift.eval(side, [[0.3, 0.2], [0.1, 0.6]])
        assert np.allclose(vals, np.sqrt(2.0), rtol=1e-12)


def test_lift_zero_is_zero():
    mesh = square_mesh()
    space = FESpace(mesh, 0, 2)
    lift = lift_face(space, diag_face(mesh), lambda x: np.zeros(len(x)), q=1)
    assert np.allclose(lift.coeffs, 0.0)


def test_lift_rejects_boundary_face():
    mesh = square_mesh()
    space = FESpace(mesh, 0, 2)
    bf = int(np.nonzero(mesh.boundary)[0][0])
    with pytest.raises(ValueError, match="interior"):
        lift_face(space, bf, lambda x: np.ones(len(x)), q=0)


def test_lift_defining_identity():
    # int_Omega r phi = int_F w {phi} for all piecewise polys phi of degree q
    mesh = refine(square_mesh(), [0, 1])
    space = FESpace(mesh, 0, 3)
    rng = np.random.default_rng(8)
    q = 1
    qspace = FESpace(mesh, 0, 2)  # evaluate phi through a degree-2 space
    rule = quadrature("triangle", 2 * 3)
    from hjbfem.fespace import element_geometry
    p0, A, _, det = element_geometry(mesh)
    faces = np.nonzero(~mesh.boundary)[0]
    for trial in range(20):
        f = int(rng.choice(faces))
        wcoef = rng.standard_normal(3)
        wfun = lambda x: wcoef[0] + wcoef[1] * x[:, 0] + wcoef[2] * x[:, 1]
        lift = lift_face(space, f, wfun, q=q)
        # phi: global piecewise polynomial of degree q with random coeffs
        phic = rng.standard_normal((mesh.n_elements, 3))  # 1, x, y per element
        phi = lambda e, x: phic[e, 0] + phic[e, 1] * x[:, 0] + phic[e, 2] * x[:, 1]
        # left side: quadrature over the two adjacent elements
        lhs = 0.0
        for side in (0, 1):
            e = int(mesh.face_elems[f, side])
            phys = p0[e] + rule.points @ A[e].T
            rvals = lift.eval(side, rule.points)
            lhs += det[e] * np.sum(rule.weights * rvals * phi(e, phys))
        # right side: face quadrature of w {phi}
        srule = quadrature("segment", 7)
        va, vb = mesh.vertices[mesh.face_vertices[f]]
        xs = np.outer(1 - srule.points, va) + np.outer(srule.points, vb)
        e0, e1 = mesh.face_elems[f]
        avg = 0.5 * (phi(int(e0), xs) + phi(int(e1), xs))
        rhs = mesh.h_face[f] * np.sum(srule.weights * wfun(xs) * avg)
        assert lhs == pytest.approx(rhs, abs=1e-12 * max(1.0, abs(rhs)))


def test_lifted_laplacian_unlifted():
    space = FESpace(square_mesh(), 0, 2)
    v = interpolate(lambda x: x[:, 0] ** 2 + x[:, 1] ** 2, space)
    lap = lifted_laplacian(v, MethodParams(s=0, p=2, chi=0))
    assert np.allclose(lap, 4.0, atol=1e-11)


def test_lifted_laplacian_smooth_function_unchanged():
    space = FESpace(square_mesh(), 0, 3)
    v = interpolate(lambda x: x[:, 0] ** 3 - 2 * x[:, 1] ** 2, space)
    lap0 = lifted_laplacian(v, MethodParams(s=0, p=3, chi=0))
    lap1 = lifted_laplacian(v, MethodParams(s=0, p=3, chi=1))
    assert np.allclose(lap0, lap1, atol=1e-10)


def test_lifted_laplacian_kink():
    mesh = square_mesh()
    space = FESpace(mesh, 0, 2)
    f = diag_face(mesh)
    n = mesh.face_normal[f]
    side1 = int(mesh.face_elems[f, 1])
    from hjbfem.fespace import element_geometry
    p0, A, _, _ = element_geometry(mesh)
    nodes = p0[:, None, :] + np.einsum("eij,bj->ebi", A, space.basis.nodes)
    coeffs = np.zeros((mesh.n_elements, space.basis.nb))
    coeffs[side1] = -nodes[side1] @ n  # grad = -n there, so [grad v . n] = 1
    v = space.function(coeffs.ravel())
    lap = lifted_laplacian(v, MethodParams(s=0, p=2, chi=1, q=0))
    assert np.allclose(lap[mesh.face_elems[f, 0]], -np.sqrt(2.0), atol=1e-11)
    assert np.allclose(lap[side1], -np.sqrt(2.0), atol=1e-11)


# -- stabilization and penalization -----------------------------------------

def test_stab_vanishes_on_conforming_gradient():
    # bubble: gradient continuous with zero tangential boundary trace
    for mesh in (square_mesh(), uniform_refine(square_mesh())):
        space = FESpace(mesh, 0, 4)
        w = interpolate(bubble, space)
        rows = stabilization_matrix(space) @ w.coeffs
        assert np.max(np.abs(rows)) <= 1e-10


def test_stab_identity_with_bstar():
    # S(w, v) = B*(w, v) - int (L w)(L v) for lam in {0, 1}
    mesh = uniform_refine(square_mesh())
    for s, p in ((0, 2), (1, 3)):
        space = FESpace(mesh, s, p)
        etab = space.element_tables(space.quad_order)
        for lam in (0.0, 1.0):
            for seed in range(25):
                w = random_fn(space, seed)
                v = random_fn(space, 1000 + seed)
                vw, _, hw = function_values(w, etab)
                vv, _, hv = function_values(v, etab)
                lw = hw[..., 0, 0] + hw[..., 1, 1] - lam * vw
                lv = hv[..., 0, 0] + hv[..., 1, 1] - lam * vv
                ll = float(np.einsum("eq,eq,eq->", etab.w, lw, lv))
                lhs = S_T(w, v)
                rhs = B_star(w, v, lam) - ll
                scale = max(abs(lhs), abs(rhs), 1.0)
                assert abs(lhs - rhs) <= 1e-10 * scale


def test_bstar_bubble_value():
    space = FESpace(square_mesh(), 0, 4)
    w = interpolate(bubble, space)
    assert B_star(w, w, 0.0) == pytest.approx(22.0 / 45.0, rel=1e-11)


def test_bstar_symmetry():
    space = FESpace(uniform_refine(square_mesh()), 0, 2)
    for seed in range(50):
        w = random_fn(space, seed)
        v = random_fn(space, 999 - seed)
        for lam in (0.0, 1.0):
            a = B_star(w, v, lam)
            b = B_star(v, w, lam)
            assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_stab_bounded_by_jumps():
    # |S(w,v)| <= C |w|_J |v|_J: the sharp constant is the operator norm of
    # S in the metric of the jump Gram matrix, computed exactly per level
    from hjbfem.forms import jump_seminorm_matrix
    mesh = uniform_refine(square_mesh())
    consts = []
    for level in range(3):
        space = FESpace(mesh, 0, 2)
        S = stabilization_matrix(space).toarray()
        Q = jump_seminorm_matrix(space).toarray()
        lam, U = np.linalg.eigh(Q)
        pos = lam > 1e-10 * lam.max()
        # S must vanish on the jump-free kernel (conforming functions)
        kernel = U[:, ~pos]
        if kernel.size:
            assert np.abs(S @ kernel).max() <= 1e-9 * np.abs(S).max()
        W = U[:, pos] / np.sqrt(lam[pos])
        consts.append(np.linalg.norm(W.T @ S @ W, 2))
        mesh = uniform_refine(mesh)
    assert np.isfinite(consts).all()
    assert max(consts) <= 1.5 * min(consts)


def test_penalty_example_value():
    mesh = square_mesh()
    space = FESpace(mesh, 0, 2)
    f = diag_face(mesh)
    side1 = int(mesh.face_elems[f, 1])
    coeffs = np.zeros((mesh.n_elements, space.basis.nb))
    coeffs[side1] = 1.0  # v = 1 on one triangle, 0 on the other
    v = space.function(coeffs.ravel())
    assert J_T(v, v, sigma=3.0, rho=10.0) == pytest.approx(25.0, rel=1e-12)


def test_penalty_positive_semidefinite():
    space = FESpace(uniform_refine(square_mesh()), 0, 2)
    J = penalty_matrix(space, 2.0, 3.0)
    rng = np.random.default_rng(4)
    for _ in range(100):
        x = rng.standard_normal(space.ndofs)
        assert x @ (J @ x) >= -1e-12 * (x @ x)


def test_penalty_continuous_space_only_gradient_jumps():
    space = FESpace(uniform_refine(square_mesh()), 1, 2)
    from hjbfem.forms import _face_matrices
    fm = _face_matrices(space)
    assert abs(fm["Jv"]).max() <= 1e-14  # value jumps vanish structurally
    v = random_fn(space, 3)
    assert J_T(v, v, 1.0, 1.0) > 0


# -- vector-field form -------------------------------------------------------

def brute_force_C_T(wf, vf):
    """Direct integration of the vector-form definition, element by element
    and face by face, independent of the vectorized assembly."""
    space = wf.space
    mesh = space.mesh
    rule = quadrature("triangle", 2 * space.p)
    srule = quadrature("segment", 2 * space.p + 1)
    from hjbfem.fespace import element_geometry, REF_VERTICES
    from hjbfem.mesh import TRI_EDGES
    p0, A, inv, det = element_geometry(mesh)

    def field_eval(field, e, ref):
        val = field.space.basis.eval(ref) @ field.coeffs[e]       # (nq, 2)
        gref = field.space.basis.grad(ref)                        # (nq, nb, 2)
        jac = np.einsum("nbd,bc->ncd", gref, field.coeffs[e])
        jac = np.einsum("ncd,dj->ncj", jac, inv[e])               # d/dx_j w_c
        return val, jac

    total = 0.0
    for e in range(mesh.n_elements):
        _, Jw = field_eval(wf, e, rule.points)
        _, Jv = field_eval(vf, e, rule.points)
        divw = Jw[:, 0, 0] + Jw[:, 1, 1]
        divv = Jv[:, 0, 0] + Jv[:, 1, 1]
        curlw = Jw[:, 1, 0] - Jw[:, 0, 1]
        curlv = Jv[:, 1, 0] - Jv[:, 0, 1]
        total += det[e] * np.sum(rule.weights * (
            np.einsum("ncd,ncd->n", Jw, Jv) - divw * divv - curlw * curlv))

    for f in range(mesh.n_faces):
        n, t = mesh.face_normal[f], mesh.face_tangent[f]
        va, vb = mesh.vertices[mesh.face_vertices[f]]
        xs = np.outer(1 - srule.points, va) + np.outer(srule.points, vb)
        sides = []
        for side in (0, 1):
            e = mesh.face_elems[f, side]
            if e < 0:
                sides.append(None)
                continue
            ref = np.einsum("ij,nj->ni", inv[e], xs - p0[e])
            sides.append(field_eval(wf, e, ref) + field_eval(vf, e, ref))
        wq = mesh.h_face[f] * srule.weights

        def avg(idx):
            if sides[1] is None:
                return sides[0][idx]
            return 0.5 * (sides[0][idx] + sides[1][idx])

        def jmp(idx):
            if sides[1] is None:
                return sides[0][idx]
            return sides[0][idx] - sides[1][idx]

        # {d_t(w.n)} [v_t] + {d_t(v.n)} [w_t]
        dtn_w = np.einsum("c,ncd,d->n", n, avg(1), t)
        dtn_v = np.einsum("c,ncd,d->n", n, avg(3), t)
        jt_w = jmp(0) @ t
        jt_v = jmp(2) @ t
        total -= np.sum(wq * (dtn_w * jt_v + dtn_v * jt_w))
        if sides[1] is not None:
            dtt_w = np.einsum("c,ncd,d->n", t, avg(1), t)
            dtt_v = np.einsum("c,ncd,d->n", t, avg(3), t)
            jn_w = jmp(0) @ n
            jn_v = jmp(2) @ n
            total += np.sum(wq * (dtt_w * jn_v + dtt_v * jn_w))
    return total


def test_C_T_matches_brute_force():
    mesh = refine(square_mesh(), [0])
    vspace = VectorFieldSpace(mesh, 3)
    rng = np.random.default_rng(21)
    for _ in range(5):
        wf = vspace.field(rng.standard_normal((mesh.n_elements, vspace.nb, 2)))
        vf = vspace.field(rng.standard_normal((mesh.n_elements, vspace.nb, 2)))
        a = C_T(wf, vf)
        b = brute_force_C_T(wf, vf)
        assert a == pytest.approx(b, rel=1e-11, abs=1e-12)


def test_C_T_constant_field():
    mesh = square_mesh()
    vspace = VectorFieldSpace(mesh, 2)
    coeffs = np.zeros((mesh.n_elements, vspace.nb, 2))
    coeffs[:, :, 0] = 1.0
    wf = vspace.field(coeffs)
    assert C_T(wf, wf) == pytest.approx(brute_force_C_T(wf, wf), abs=1e-12)


def test_C_T_reproduces_stabilization():
    mesh = uniform_refine(square_mesh())
    for s, p in ((0, 2), (0, 3), (1, 3)):
        space = FESpace(mesh, s, p)
        vspace = VectorFieldSpace(mesh, p)
        for seed in range(10):
            w = random_fn(space, seed)
            v = random_fn(space, 500 + seed)
            lhs = S_T(w, v)
            rhs = C_T(gradient_field(w, vspace), gradient_field(v, vspace))
            assert abs(lhs - rhs) <= 1e-11 * max(1.0, abs(lhs))


# -- nonlinear form -----------------------------------------------------------

def test_A_T_of_zero_against_bubble():
    # single control, a = I, f = 1, lam = 0, theta = 0, sigma = rho = 0:
    # A(0; v) = -int Lap v, and the bubble integrates to -2/3
    prob, grid = const_problem([[np.eye(2)]], f_offsets=[[1.0]])
    space = FESpace(square_mesh(), 0, 4)
    params = MethodParams(s=0, p=4, theta=0.0, sigma=0.0, rho=0.0)
    w = space.function(np.zeros(space.ndofs))
    r, fc = A_T_residual(w, prob, grid, params)
    v = interpolate(bubble, space)
    assert r @ v.coeffs == pytest.approx(2.0 / 3.0, rel=1e-12)
    assert fc.alpha.shape == (space.mesh.n_elements,
                              len(quadrature("triangle", 8).points))


def test_A_T_linear_in_second_argument():
    prob, grid, _, mesh = square_smooth_hjb()
    space = FESpace(mesh, 0, 2)
    params = MethodParams(s=0, p=2)
    rng = np.random.default_rng(17)
    w = random_fn(space, 30)
    r, _ = A_T_residual(w, prob, grid, params)
    for _ in range(5):
        v = rng.standard_normal(space.ndofs)
        z = rng.standard_normal(space.ndofs)
        delta = rng.standard_normal()
        lhs = r @ (v + delta * z)
        rhs = r @ v + delta * (r @ z)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_single_element_linearized_rank_one():
    mesh = build_mesh([(0, 0), (1, 0), (0, 1)], [(0, 1, 2)])
    prob, grid = const_problem([[np.eye(2)]], f_offsets=[[0.0]])
    space = FESpace(mesh, 0, 2)
    params = MethodParams(s=0, p=2, theta=0.0, sigma=0.0, rho=0.0)
    w = space.function(np.zeros(space.ndofs))
    _, fc = select_controls(w, prob, grid)
    system = assemble_linearized(fc, space, prob, grid, params)
    M = system.matrix.toarray()
    assert np.linalg.matrix_rank(M, tol=1e-10) == 1
    # |K| c c^T with c_i = Lap phi_i
    etab = space.element_tables(space.quad_order)
    c = etab.lap[0, 0]  # constants for p = 2
    assert np.allclose(M, 0.5 * np.outer(c, c), atol=1e-12)


@pytest.mark.parametrize("chi", [0, 1])
def test_linearized_matrix_consistent_with_residual(chi):
    # M(fc(w)) w - rhs(fc(w)) = A_T-residual(w) when controls frozen at w
    prob, grid, _, mesh = pentagon_problem(n_alpha=4, n_beta=6)
    mesh = uniform_refine(mesh)
    for s in (0, 1):
        space = FESpace(mesh, s, 2)
        params = MethodParams(s=s, p=2, theta=0.5, chi=chi)
        w = random_fn(space, 77 + s)
        r, fc = A_T_residual(w, prob, grid, params)
        system = assemble_linearized(fc, space, prob, grid, params)
        r2 = system.matrix @ w.coeffs - system.rhs
        scale = max(np.abs(r).max(), 1.0)
        assert np.allclose(r, r2, atol=1e-10 * scale)


def test_lipschitz_and_consistency_constants_stable():
    # (A1): |A(w;v) - A(z;v)| <= C ||w-z||_T ||v||_T and
    # (A2): |A(w;v) - int F_g[w] L v| <= C |w|_J ||v||_T, with sampled
    # constants bounded and non-increasing across mesh levels
    from hjbfem.benchmarks import pentagon_problem
    from hjbfem.fespace import norms as fe_norms, function_values
    prob, grid, exact, mesh = pentagon_problem(n_alpha=6, n_beta=8)
    params = MethodParams(s=0, p=2, theta=0.5)
    rng = np.random.default_rng(0)
    lips, conss = [], []
    for level in range(3):
        space = FESpace(mesh, 0, 2)
        etab = space.element_tables(space.quad_order)
        lip = cons = 0.0
        for _ in range(30):
            w = space.function(rng.standard_normal(space.ndofs))
            z = space.function(rng.standard_normal(space.ndofs))
            v = space.function(rng.standard_normal(space.ndofs))
            rw, _ = A_T_residual(w, prob, grid, params)
            rz, _ = A_T_residual(z, prob, grid, params)
            ndiff, _, _ = fe_norms(space.function(w.coeffs - z.coeffs))
            nv, _, _ = fe_norms(v)
            lip = max(lip, abs((rw - rz) @ v.coeffs) / (ndiff * nv))
            F, _ = select_controls(w, prob, grid)
            _, _, hv = function_values(v, etab)
            lv = hv[..., 0, 0] + hv[..., 1, 1]
            integral = float(np.einsum("eq,eq,eq->", etab.w, F, lv))
            _, jw, _ = fe_norms(w)
            cons = max(cons, abs(rw @ v.coeffs - integral) / (jw * nv))
        lips.append(lip)
        conss.append(cons)
        mesh = refine(mesh, range(mesh.n_elements))
    assert np.isfinite(lips).all() and np.isfinite(conss).all()
    assert max(lips) <= 2.0 * lips[0] and max(lips) <= 50.0
    assert max(conss) <= 2.0 * conss[0] and max(conss) <= 100.0


def test_consistency_gap_vanishes_for_conforming_argument():
    # A(w;v) equals the tested operator integral exactly when w has no jumps
    from hjbfem.fespace import function_values
    prob, grid = const_problem([[np.eye(2)]], f_offsets=[[1.0]])
    space = FESpace(uniform_refine(square_mesh()), 0, 4)
    params = MethodParams(s=0, p=4, theta=0.5)
    w = interpolate(bubble, space)
    r, _ = A_T_residual(w, prob, grid, params)
    etab = space.element_tables(space.quad_order)
    F, _ = select_controls(w, prob, grid)
    rng = np.random.default_rng(5)
    for _ in range(10):
        v = space.function(rng.standard_normal(space.ndofs))
        _, _, hv = function_values(v, etab)
        lv = hv[..., 0, 0] + hv[..., 1, 1]
        integral = float(np.einsum("eq,eq,eq->", etab.w, F, lv))
        assert r @ v.coeffs == pytest.approx(integral, rel=1e-10, abs=1e-10)


def test_stability_parameters_pentagon_window():
    from hjbfem.forms import stability_parameters
    nu = np.cos(9 * np.pi / 20)
    lo, hi, mu = stability_parameters(nu, 0.5)
    assert lo == pytest.approx(0.30224, abs=5e-6)
    assert hi == pytest.approx(0.69776, abs=5e-6)
    assert mu == pytest.approx(nu / 2, rel=1e-12)
    assert mu == pytest.approx(0.07822, abs=5e-6)
    # outside the window the margin is nonpositive
    assert stability_parameters(nu, 0.1)[2] <= 0
    assert stability_parameters(nu, 0.9)[2] <= 0


def test_empirical_coercivity_of_symmetric_part():
    prob, grid, _, mesh = pentagon_problem(n_alpha=4, n_beta=6)
    space = FESpace(mesh, 0, 2)
    params = MethodParams(s=0, p=2, theta=0.5, sigma=100.0, rho=100.0)
    w = space.function(np.zeros(space.ndofs))
    _, fc = select_controls(w, prob, grid)
    system = assemble_linearized(fc, space, prob, grid, params)
    M = system.matrix
    rng = np.random.default_rng(6)
    for _ in range(100):
        x = rng.standard_normal(space.ndofs)
        assert x @ (M @ x) > 0.0
