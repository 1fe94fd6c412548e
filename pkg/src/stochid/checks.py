"""Fast invariant checks run by ``stochid check``."""
from __future__ import annotations

import copy

import numpy as np
from scipy.sparse.linalg import spsolve

from .fem import (FeSpace, apply_dirichlet, assemble_load, build_interval_mesh,
                  build_spatial_operators, l2_error, refine_uniform)
from .forward import DiscreteProblem, solve_state
from .optimizer import AugLagState, auglag_value, grad_q, grad_u
from .sparse_grid import build_sparse_grid, dehierarchize, hierarchize
from .stochastic import DensityModel, apply_kron, assemble_stochastic_operators


def toy_problem(n_q_elems: int = 3, n: int = 2, level: int = 2, forcing=None) -> DiscreteProblem:
    """1D problem with M_q = n_q_elems + 1 and M_u = 2 n_q_elems + 1 dofs."""
    mesh_q = build_interval_mesh(n_q_elems)
    space_q = FeSpace(mesh_q)
    space_u = FeSpace(refine_uniform(mesh_q), dirichlet=True)
    ops = build_spatial_operators(space_q, space_u)
    grid = build_sparse_grid(n, level)
    rho = DensityModel.uniform(n)
    stoch = assemble_stochastic_operators(grid, rho)
    f = assemble_load(space_u, forcing or (lambda x: 1.0 + x[:, 0]))
    return DiscreteProblem(ops, grid, rho, stoch, f)


def random_state(problem: DiscreteProblem, rng, c: float = 3.0, beta: float = 0.1) -> AugLagState:
    shape_q, shape_u = (problem.M_q, problem.N), (problem.M_u, problem.N)
    mask = problem.interior[:, None]
    return AugLagState(q=1.0 + rng.random(shape_q), u=rng.standard_normal(shape_u) * mask,
                       lam=rng.standard_normal(shape_u) * mask, c=c, beta=beta)


def gradient_fd_error(problem: DiscreteProblem, seed: int = 0, h: float = 1e-5,
                      n_directions: int = 1) -> float:
    """Worst relative gap between analytic and central-difference directional derivatives.

    One random state is drawn from ``seed``; each gradient is probed along ``n_directions``
    random directions.
    """
    rng = np.random.default_rng(seed)
    st = random_state(problem, rng)
    u_hat = rng.standard_normal(st.u.shape) * problem.interior[:, None]
    worst = 0.0
    for attr, grad in (("q", grad_q(st, problem)), ("u", grad_u(st, problem, u_hat))):
        for _ in range(n_directions):
            d = rng.standard_normal(grad.shape)
            if attr == "u":
                d *= problem.interior[:, None]
            plus, minus = copy.copy(st), copy.copy(st)
            setattr(plus, attr, getattr(st, attr) + h * d)
            setattr(minus, attr, getattr(st, attr) - h * d)
            fd = (auglag_value(plus, u_hat, problem) - auglag_value(minus, u_hat, problem)) / (2 * h)
            worst = max(worst, abs(fd - np.sum(grad * d)) / max(abs(fd), 1e-300))
    return worst


def fem_errors(sizes=(8, 16, 32, 64)) -> list[float]:
    """L2 errors of the forward solve for q = 1 + x^2, u = x(1 - x) on successively refined meshes.

    q lives on the coarse mesh of each pair and u on its uniform refinement, as in the
    identification problem.
    """
    errs = []
    for m in sizes:
        space_q = FeSpace(build_interval_mesh(m))
        space_u = FeSpace(refine_uniform(space_q.mesh), dirichlet=True)
        ops = build_spatial_operators(space_q, space_u)
        K = ops.trilinear.matrix(space_q.interpolate(lambda x: 1 + x[:, 0] ** 2))
        f = assemble_load(space_u, lambda x: 2 - 2 * x[:, 0] + 6 * x[:, 0] ** 2)
        u = spsolve(apply_dirichlet(K, space_u.dirichlet_mask).tocsc(), f)
        errs.append(l2_error(space_u, u, lambda x: x[:, 0] * (1 - x[:, 0])))
    return errs


def run_checks() -> list[tuple[str, bool, str]]:
    results = []
    errs = fem_errors()
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    results.append(("fem_order", all(3.6 <= r <= 4.4 for r in ratios),
                    "L2 error ratios " + ", ".join(f"{r:.3f}" for r in ratios)))

    rng = np.random.default_rng(0)
    grid = build_sparse_grid(3, 4)
    V = rng.standard_normal((5, grid.coords.shape[0]))
    rt = np.abs(dehierarchize(grid, hierarchize(grid, V)) - V).max()
    results.append(("sparse_grid_roundtrip", rt <= 1e-12, f"max round-trip error {rt:.2e}"))

    problem = toy_problem()
    gerr = gradient_fd_error(problem)
    results.append(("gradient_fd", gerr <= 1e-6, f"relative FD gap {gerr:.2e}"))

    S = rng.standard_normal((4, 4))
    A = rng.standard_normal((3, 3))
    v = rng.standard_normal(12)
    kerr = np.abs(apply_kron(S, A, v) - np.kron(S, A) @ v).max()
    results.append(("apply_kron", kerr <= 1e-12, f"max error vs dense kron {kerr:.2e}"))

    U = solve_state(problem.surplus(np.ones((problem.M_q, problem.N))), problem.f, problem)
    finite = bool(np.isfinite(U).all())
    results.append(("state_solve", finite, "finite solution for q = 1"))
    return results
