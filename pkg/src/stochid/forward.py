"""Collocation forward solves, the preconditioned constraint, and the adjoint.

Conventions: a field is an M x N array of surpluses Z; its nodal values are
Z P^T (P[k, j] = psi_j(y_k)) and surpluses are recovered as V H^T with H the
hierarchization matrix. At every collocation node y_j the state solves the
Dirichlet problem K(q_j) u_j = f, and the constraint is the Laplace
preconditioned residual e_j = A_x^{-1} Z (K(q_j) u_j - f), with Z zeroing the
boundary rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import CoercivityError, InvalidArgument
from .fem import SpatialOperators, apply_dirichlet
from .sparse_grid import SparseGrid, SurplusField
from .stochastic import DensityModel, StochasticOperators


@dataclass(eq=False)
class DiscreteProblem:
    """Everything fixed during an identification run."""
    spatial: SpatialOperators
    grid: SparseGrid
    density: DensityModel
    stoch: StochasticOperators
    f: np.ndarray                   # load vector on V_u, zero on boundary
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        if self.f.shape != (self.M_u,):
            raise InvalidArgument(f"load vector must have length {self.M_u}")
        if self.grid.dim != self.density.dim:
            raise InvalidArgument("grid and density dimensions differ")
        self.f = self.f * self.interior
        self.P = self.grid.evaluation_matrix
        self.H = self.grid.hierarchization_matrix.toarray()
        self.Ax = self.spatial.stiff_u_bc
        self.Ax_lu = splu(self.Ax.tocsc())
        self.reg_gram = (self.spatial.mass_q + self.spatial.stiff_q).tocsr()

    @property
    def M_u(self) -> int:
        return self.spatial.space_u.n_dofs

    @property
    def M_q(self) -> int:
        return self.spatial.space_q.n_dofs

    @property
    def N(self) -> int:
        return self.grid.n_nodes

    @property
    def boundary(self) -> np.ndarray:
        return self.spatial.space_u.mesh.boundary_vertices

    @property
    def interior(self) -> np.ndarray:
        m = np.ones(self.M_u)
        m[self.boundary] = 0.0
        return m

    @property
    def S(self) -> np.ndarray:
        return self.stoch.S_rho

    def nodal(self, Z) -> np.ndarray:
        return Z @ self.P.T

    def surplus(self, V) -> np.ndarray:
        return V @ self.H.T

    def solve_laplace(self, R) -> np.ndarray:
        """A_x^{-1} R column by column (A_x with Dirichlet rows)."""
        return self.Ax_lu.solve(np.asarray(R, dtype=float))

    def check_coercive(self, Qn):
        bad = np.argwhere(Qn <= 0)
        if bad.size:
            i, j = bad[0]
            raise CoercivityError(
                f"coefficient is {Qn[i, j]:.4g} <= 0 at vertex {i}, collocation node {j}",
                vertex=int(i), node=int(j), value=float(Qn[i, j]))

    def node_matrix(self, q_nodal) -> sp.csr_matrix:
        """Dirichlet q-weighted stiffness at one collocation node."""
        K = self.spatial.trilinear.matrix(q_nodal)
        return apply_dirichlet(K, ~self.interior.astype(bool))


def _coeffs(x):
    return x.coeffs if isinstance(x, SurplusField) else np.asarray(x, dtype=float)


def _as_field(problem: DiscreteProblem, Z, space) -> SurplusField:
    return SurplusField(space, problem.grid, Z)


def solve_state(q, f, problem: DiscreteProblem, as_field: bool = False):
    """Per-node Dirichlet solves K(q_j) u_j = f; returns surpluses of u."""
    Q = _coeffs(q)
    f = np.asarray(f, dtype=float) * problem.interior
    Qn = problem.nodal(Q)
    problem.check_coercive(Qn)
    Un = np.empty((problem.M_u, problem.N))
    for j in range(problem.N):
        Un[:, j] = splu(problem.node_matrix(Qn[:, j]).tocsc()).solve(f)
    Z = problem.surplus(Un)
    return _as_field(problem, Z, problem.spatial.space_u) if as_field else Z


@dataclass(eq=False)
class ConstraintEval:
    e_surpluses: np.ndarray   # M_u x N
    raw_paths: np.ndarray     # M_u x N nodal values e_j
    residuals: np.ndarray     # Z (K(q_j) u_j - f) before preconditioning


def eval_constraint(q, u, f, problem: DiscreteProblem) -> ConstraintEval:
    Qn = problem.nodal(_coeffs(q))
    Un = problem.nodal(_coeffs(u))
    f = np.asarray(f, dtype=float)
    R = problem.spatial.trilinear.apply_batch(Qn, Un) - f[:, None]
    R *= problem.interior[:, None]
    En = problem.solve_laplace(R)
    return ConstraintEval(problem.surplus(En), En, R)


def constraint_pullback(G_E, q, u, problem: DiscreteProblem):
    """Transpose of the constraint Jacobian applied to a surplus-space covector.

    Given G_E = dF/dE_z for a scalar F depending on the constraint surpluses,
    returns (dF/dQ_z, dF/dU_z).
    """
    Qn = problem.nodal(_coeffs(q))
    Un = problem.nodal(_coeffs(u))
    Gn = G_E @ problem.H                                   # dF/dE_n
    Rn = problem.solve_laplace(Gn) * problem.interior[:, None]   # dF/d(residual)
    tri = problem.spatial.trilinear
    gQ = tri.contract_out(Rn, Un) @ problem.P
    gU = tri.apply_batch(Qn, Rn) @ problem.P
    return gQ, gU


def constraint_jvp(dq, du, q, u, problem: DiscreteProblem) -> np.ndarray:
    """Directional derivative of the constraint surpluses along (dq, du)."""
    tri = problem.spatial.trilinear
    Qn, Un = problem.nodal(_coeffs(q)), problem.nodal(_coeffs(u))
    R = np.zeros((problem.M_u, problem.N))
    if dq is not None:
        R += tri.apply_batch(problem.nodal(dq), Un)
    if du is not None:
        R += tri.apply_batch(Qn, problem.nodal(du))
    R *= problem.interior[:, None]
    return problem.surplus(problem.solve_laplace(R))


def solve_adjoint(q, u, u_hat, problem: DiscreteProblem) -> np.ndarray:
    """Adjoint of the reduced misfit 1/2 <u(q) - u_hat>_{S kron A_x}.

    In nodal coordinates the misfit covector is g_n = A_x (U - U_hat) S H and
    the q-weighted operator is block diagonal, so each node solves
    K(q_j) lambda_j = -g_n[:, j]. Returns the surpluses of lambda.
    """
    Qn = problem.nodal(_coeffs(q))
    problem.check_coercive(Qn)
    D = _coeffs(u) - _coeffs(u_hat)
    g = (problem.Ax @ D @ problem.S) @ problem.H
    g *= problem.interior[:, None]
    Ln = np.empty_like(g)
    for j in range(problem.N):
        Ln[:, j] = splu(problem.node_matrix(Qn[:, j]).tocsc()).solve(-g[:, j])
    return problem.surplus(Ln)


def reduced_gradient(q, u, u_hat, problem: DiscreteProblem) -> np.ndarray:
    """Gradient of q -> 1/2 <u(q) - u_hat>_{S kron A_x} when u = u(q), via the adjoint."""
    lam = solve_adjoint(q, u, u_hat, problem)
    Ln, Un = problem.nodal(lam), problem.nodal(_coeffs(u))
    return problem.spatial.trilinear.contract_out(Ln, Un) @ problem.P


def residual_norms(q, u, f, problem: DiscreteProblem) -> np.ndarray:
    """Per-node Euclidean norms of the unpreconditioned residual (diagnostics)."""
    return np.linalg.norm(eval_constraint(q, u, f, problem).residuals, axis=0)


def build_problem(spatial: SpatialOperators, grid: SparseGrid, density: DensityModel,
                  stoch: StochasticOperators, f) -> DiscreteProblem:
    return DiscreteProblem(spatial, grid, density, stoch, f)
