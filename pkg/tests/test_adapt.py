import numpy as np
import pytest

from hjbfem.adapt import adaptive_loop, dorfler_mark
from hjbfem.benchmarks import pentagon_problem, square_smooth_hjb
from hjbfem.forms import MethodParams
from hjbfem.mesh import mesh_sizes
from hjbfem.solver import SolverConfig


def test_dorfler_simple():
    assert list(dorfler_mark([4.0, 3.0, 2.0, 1.0], 0.25)) == [0]


def test_dorfler_equal_values():
    assert len(dorfler_mark([1.0, 1.0, 1.0, 1.0], 0.25)) == 1


def test_dorfler_bulk_one_marks_positive():
    marked = dorfler_mark([1.0, 0.0, 2.0, 0.0], 1.0)
    assert list(marked) == [0, 2]


def test_dorfler_all_zero_empty():
    assert dorfler_mark([0.0, 0.0], 0.5).size == 0


def test_dorfler_greedy_minimality():
    rng = np.random.default_rng(0)
    for _ in range(50):
        eta_sq = rng.random(30) ** 2
        bulk = rng.uniform(0.1, 0.9)
        marked = dorfler_mark(eta_sq, bulk)
        total = eta_sq.sum()
        assert eta_sq[marked].sum() >= bulk * total * (1 - 1e-12)
        if len(marked) > 1:
            # dropping the smallest marked value must break the inequality
            smallest = marked[np.argmin(eta_sq[marked])]
            rest = [k for k in marked if k != smallest]
            assert eta_sq[rest].sum() < bulk * total


def test_dorfler_rejects_bad_input():
    with pytest.raises(ValueError):
        dorfler_mark([-1.0, 1.0], 0.5)
    with pytest.raises(ValueError):
        dorfler_mark([1.0], 0.0)


def test_adaptive_loop_smooth_problem_rate():
    # smooth solution: adaptive refinement behaves like uniform, error
    # slope vs N close to -(p-1)/2
    prob, grid, exact, mesh = square_smooth_hjb()
    params = MethodParams(s=1, p=2)
    records = adaptive_loop(prob, grid, exact, params, SolverConfig(), mesh,
                            max_dofs=3000, bulk=0.9)
    ns = np.array([r.ndofs for r in records], float)
    es = np.array([r.error for r in records])
    slope = np.polyfit(np.log(ns[-4:]), np.log(es[-4:]), 1)[0]
    assert abs(slope - (-0.5)) <= 0.05
    assert all(np.diff([r.ndofs for r in records]) > 0)


def test_adaptive_loop_concentrates_near_corner():
    prob, grid, exact, mesh = pentagon_problem(n_alpha=8, n_beta=12)
    params = MethodParams(s=1, p=2)
    records, iterates = adaptive_loop(prob, grid, exact, params,
                                      SolverConfig(), mesh, max_dofs=2000,
                                      keep_iterates=True)
    assert len(records) >= 11
    u_final = iterates[-1][0]
    final_mesh = u_final.space.mesh
    sizes = mesh_sizes(final_mesh).h_elem
    cent = final_mesh.vertices[final_mesh.elements].mean(axis=1)
    near = np.linalg.norm(cent, axis=1) < 0.1
    assert near.any()
    assert sizes[near].max() <= sizes.max() / 4.0
