"""Adaptive DG / C0-IP finite elements for HJB and Isaacs equations."""

from .mesh import (Mesh, build_mesh, mesh_sizes, refine, uniform_refine,
                   read_mesh, write_mesh)
from .quadrature import quadrature
from .fespace import (FESpace, FEFunction, interpolate, norms, eval_function,
                      face_jump_avg, transfer)
from .problem import (ControlGrid, IsaacsProblem, gamma, verify_cordes,
                      f_gamma_point, lipschitz_check_point, PointState)
from .forms import (MethodParams, FrozenControls, SparseSystem, lift_face,
                    lifted_laplacian, S_T, B_star, J_T, C_T, A_T_residual,
                    assemble_linearized, select_controls)
from .solver import SolverConfig, SolveTrace, linear_solve, solve_hjb_fixed_alpha, solve_isaacs
from .estimate import EstimatorReport, estimate_eta, eta_local, error_norm
from .adapt import AdaptiveRecord, dorfler_mark, adaptive_loop
from .conformity import (VectorField, VectorFieldSpace, enrich_scalar,
                         enrich_vector, miranda_talenti_gap, gradient_field,
                         vf_norms)
from . import benchmarks

__all__ = [name for name in dir() if not name.startswith("_")]
