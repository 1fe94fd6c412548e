"""Augmented Lagrangian method with sequential splitting.

L_c(q, u, lam) = 1/2 <u - u_hat>_{S kron A_x}
               + beta/2 <q, q>_{S_mix kron (A^q + A_x^q)}
               + <lam, e(q, u)>_{S kron A_x} + c/2 <e, e>_{S kron A_x}

Each outer step minimizes L_c exactly over q (u, lam fixed), then over u
(q, lam fixed), both quadratic problems solved by preconditioned CG (Jacobi,
or the inverse of a Kronecker model operator), then updates lam <- lam + c e
and grows c.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import splu

from .errors import InvalidArgument, IterationLimitError
from .forward import DiscreteProblem, constraint_jvp, constraint_pullback, eval_constraint

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    beta: float = 5e-5
    c0: float = 10.0
    c_growth: float = 2.0
    c_max: float = 1e4
    outer_tol: float = 1e-5
    pcg_tol: float = 1e-5
    pcg_max_iter: int = 5000
    preconditioner: str = "jacobi"   # or "kron": Kronecker-model preconditioners
    max_outer: int = 20
    q_init: float = 1.0
    enforce_bounds: bool = False
    q_min: float = 1e-3
    q_max: float = 1e6

    def validate(self):
        for name in ("c0", "outer_tol", "pcg_tol"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.beta < 0:
            raise InvalidArgument("beta must be nonnegative")
        if self.c_growth < 1:
            raise InvalidArgument("c_growth must be >= 1")
        if self.c_max < self.c0:
            raise InvalidArgument("c_max must be >= c0")
        if self.pcg_max_iter < 1 or self.max_outer < 1:
            raise InvalidArgument("iteration limits must be >= 1")
        if self.preconditioner not in ("jacobi", "kron"):
            raise InvalidArgument("preconditioner must be 'jacobi' or 'kron'")
        if self.q_min >= self.q_max:
            raise InvalidArgument("q_min must be below q_max")
        return self


@dataclass(eq=False)
class AugLagState:
    q: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    c: float
    beta: float
    k: int = 0
    history: list = field(default_factory=list)


# -- value and gradients ----------------------------------------------------------

def _kron_form(V, W, S, A) -> float:
    return float(np.sum(V * (A @ W @ S)))


def constraint(state: AugLagState, problem: DiscreteProblem) -> np.ndarray:
    return eval_constraint(state.q, state.u, problem.f, problem).e_surpluses


def cost_functional(state: AugLagState, u_hat, problem: DiscreteProblem) -> float:
    """Misfit plus regularization, without the constraint terms."""
    D = state.u - u_hat
    val = 0.5 * _kron_form(D, D, problem.S, problem.Ax)
    val += 0.5 * state.beta * _kron_form(state.q, state.q, problem.stoch.S_mix, problem.reg_gram)
    return val


def auglag_value(state: AugLagState, u_hat, problem: DiscreteProblem) -> float:
    E = constraint(state, problem)
    val = cost_functional(state, u_hat, problem)
    val += _kron_form(state.lam, E, problem.S, problem.Ax)
    val += 0.5 * state.c * _kron_form(E, E, problem.S, problem.Ax)
    return val


def _constraint_covector(state, problem, E=None):
    if E is None:
        E = constraint(state, problem)
    return problem.Ax @ (state.lam + state.c * E) @ problem.S


def grad_q(state: AugLagState, problem: DiscreteProblem, u_hat=None) -> np.ndarray:
    gq, _ = constraint_pullback(_constraint_covector(state, problem), state.q, state.u, problem)
    return gq + state.beta * (problem.reg_gram @ state.q @ problem.stoch.S_mix)


def grad_u(state: AugLagState, problem: DiscreteProblem, u_hat) -> np.ndarray:
    _, gu = constraint_pullback(_constraint_covector(state, problem), state.q, state.u, problem)
    return gu + problem.Ax @ (state.u - u_hat) @ problem.S


def hess_q(dq, state: AugLagState, problem: DiscreteProblem) -> np.ndarray:
    dE = constraint_jvp(dq, None, state.q, state.u, problem)
    g, _ = constraint_pullback(state.c * (problem.Ax @ dE @ problem.S), state.q, state.u, problem)
    return g + state.beta * (problem.reg_gram @ dq @ problem.stoch.S_mix)


def hess_u(du, state: AugLagState, problem: DiscreteProblem) -> np.ndarray:
    dE = constraint_jvp(None, du, state.q, state.u, problem)
    _, g = constraint_pullback(state.c * (problem.Ax @ dE @ problem.S), state.q, state.u, problem)
    return g + problem.Ax @ du @ problem.S


# -- preconditioned CG --------------------------------------------------------------

@dataclass
class PcgResult:
    x: np.ndarray
    iterations: int
    residual: float


def pcg(apply: Callable, b: np.ndarray, x0: Optional[np.ndarray] = None, precond=None,
        tol: float = 1e-8, max_iter: int = 1000) -> PcgResult:
    """CG on an SPD operator.

    Stops when ||b - A x|| <= tol * min(||b||, ||b - A x0||): the solver
    contract ||residual|| <= tol ||b|| always holds, and a warm start still
    reduces its own residual by the factor tol. Residuals at round-off level
    (below 100 eps ||b||) count as converged.
    """
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply(x) if x0 is not None else b.copy()
    bnorm = np.linalg.norm(b)
    rnorm = np.linalg.norm(r)
    target = max(tol * min(bnorm, rnorm), 100 * np.finfo(float).eps * bnorm)
    if rnorm <= target or bnorm == 0.0:
        return PcgResult(x, 0, rnorm / bnorm if bnorm else 0.0)
    if precond is None:
        M = lambda v: v
    elif callable(precond):
        M = precond
    else:
        M = lambda v: v * precond
    z = M(r)
    p = z.copy()
    rz = np.vdot(r, z)
    for it in range(1, max_iter + 1):
        Ap = apply(p)
        pAp = np.vdot(p, Ap)
        if pAp <= 0:
            raise InvalidArgument("operator is not positive definite along a search direction")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = np.linalg.norm(r)
        if rnorm <= target:
            return PcgResult(x, it, rnorm / bnorm)
        z = M(r)
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise IterationLimitError(
        f"PCG stopped after {max_iter} iterations with relative residual {rnorm / bnorm:.3e}",
        residual=rnorm / bnorm, iterations=max_iter)


# -- Jacobi diagonals -------------------------------------------------------------------

def _stoch_coupling(problem: DiscreteProblem) -> np.ndarray:
    """C = H^T S H: the surplus Gram matrix pulled back to nodal coordinates."""
    C = problem._cache.get("C")
    if C is None:
        C = problem.H.T @ problem.S @ problem.H
        problem._cache["C"] = C
    return C


def _block_diag_entries(chunk_vectors, problem, C, n_dofs, chunk=32):
    """diag[i, a] = sum_jk P[j,a] P[k,a] C[j,k] w_ij^T A_x^{-1} w_ik.

    ``chunk_vectors(ids)`` returns the vectors w_ij as an (M_u, len(ids), N) array.
    """
    P = problem.P
    N = problem.N
    out = np.zeros((n_dofs, N))
    interior = problem.interior
    for start in range(0, n_dofs, chunk):
        ids = np.arange(start, min(start + chunk, n_dofs))
        W = chunk_vectors(ids) * interior[:, None, None]
        X = problem.solve_laplace(W.reshape(problem.M_u, -1)).reshape(W.shape)
        Gam = np.einsum("mbj,mbk->bjk", W, X)
        out[ids] = np.einsum("ja,bjk,ka->ba", P, C[None] * Gam, P, optimize=True)
    return out


def jacobi_q(state: AugLagState, problem: DiscreteProblem) -> np.ndarray:
    tri = problem.spatial.trilinear
    Un_cols = problem.nodal(state.u)[tri.cols]            # nnz x N
    Wcsc = tri.W.tocsc()

    def vectors(ids):
        sub = Wcsc[:, ids].toarray()                        # nnz x b
        # G[i] u_j = sum over pattern entries of w * u_j[col], summed into rows
        return np.stack([tri.row_sum(sub[:, [b]] * Un_cols) for b in range(len(ids))], axis=1)

    d = state.c * _block_diag_entries(vectors, problem, _stoch_coupling(problem), problem.M_q)
    d += state.beta * np.outer(problem.reg_gram.diagonal(), np.diag(problem.stoch.S_mix))
    return d


def jacobi_u(state: AugLagState, problem: DiscreteProblem) -> np.ndarray:
    Qn = problem.nodal(state.q)
    Ks = [problem.spatial.trilinear.matrix(Qn[:, j]).tocsc() for j in range(problem.N)]

    def vectors(ids):
        return np.stack([K[:, ids].toarray() for K in Ks], axis=2)   # K_j e_i

    d = state.c * _block_diag_entries(vectors, problem, _stoch_coupling(problem), problem.M_u)
    d += np.outer(problem.Ax.diagonal(), np.diag(problem.S))
    return d


def kron_precond_q(state: AugLagState, problem: DiscreteProblem) -> Callable:
    """Inverse of beta R kron S_mix + c G(u_bar)^T A_x^{-1} G(u_bar) kron S, u_bar the node-averaged state."""
    tri = problem.spatial.trilinear
    u_bar = problem.nodal(state.u).mean(axis=1) * problem.interior
    Gu = tri.field_matrix(u_bar) * problem.interior[:, None]
    Gbar = Gu.T @ problem.solve_laplace(Gu)
    R = problem.reg_gram.toarray()
    mu, V = sla.eigh(problem.S, problem.stoch.S_mix)
    facs = [sla.cho_factor(state.beta * R + state.c * m * Gbar + 1e-14 * np.eye(len(R)) * np.trace(R))
            for m in mu]
    shape = (problem.M_q, problem.N)

    def apply(r):
        RV = r.reshape(shape) @ V
        Z = np.column_stack([sla.cho_solve(f, RV[:, k]) for k, f in enumerate(facs)])
        return (Z @ V.T).ravel()
    return apply


def kron_precond_u(state: AugLagState, problem: DiscreteProblem) -> Callable:
    """Preconditioner for the u-subproblem built in nodal coordinates.

    With w_j = K_j u_j the penalty term is exactly (C kron c A_x^{-1}) in w,
    C = H^T S H. The misfit term is modelled with the node-averaged K_bar, so
    the model operator is diag(K_j) (C kron B) diag(K_j) with
    B = c A_x^{-1} + K_bar^{-1} A_x K_bar^{-1}; its inverse needs one sparse
    factorization per node.

    That model degenerates when some K_j is indefinite or nearly singular
    (q not positive at a node), because it loses the C kron A_x floor of the
    misfit term. In that case the mean-field model C kron (c K_bar A_x^{-1} K_bar + A_x)
    is used instead; it is SPD for any q.
    """
    interior = problem.interior.astype(bool)
    tri = problem.spatial.trilinear
    Qn = problem.nodal(state.q)
    Ad = problem.Ax.toarray()[np.ix_(interior, interior)]
    Kbar = tri.matrix(Qn.mean(axis=1)).toarray()[np.ix_(interior, interior)]
    Cinv = problem.P @ np.linalg.solve(problem.S, problem.P.T)
    shape = (problem.M_u, problem.N)

    if Qn.min() <= 0:
        log.debug("nonpositive nodal q (min %.3g): mean-field u preconditioner", Qn.min())
        D = state.c * Kbar @ np.linalg.solve(Ad, Kbar) + Ad
        fac = sla.cho_factor(0.5 * (D + D.T))

        def apply_mean(r):
            G = r.reshape(shape)[interior] @ problem.H
            out = np.zeros(shape)
            out[interior] = sla.cho_solve(fac, G) @ Cinv @ problem.H.T
            return out.ravel()
        return apply_mean

    Kj = [splu(tri.matrix(Qn[:, j]).tocsc()[interior][:, interior]) for j in range(problem.N)]
    KinvA = np.linalg.solve(Kbar, Ad)
    B = state.c * np.linalg.inv(Ad) + np.linalg.solve(Kbar, KinvA.T).T
    fac = sla.cho_factor(0.5 * (B + B.T))

    def solve_nodes(X):
        return np.column_stack([Kj[j].solve(X[:, j]) for j in range(problem.N)])

    def apply(r):
        G = r.reshape(shape)[interior] @ problem.H       # nodal covector
        Y = sla.cho_solve(fac, solve_nodes(G)) @ Cinv
        out = np.zeros(shape)
        out[interior] = solve_nodes(Y) @ problem.H.T
        return out.ravel()
    return apply


# -- subproblems ----------------------------------------------------------------------

def solve_subproblem_q(state: AugLagState, problem: DiscreteProblem, cfg: RunConfig, u_hat=None):
    """Minimize L_c over q for fixed (u, lam); returns (q, PCG iterations)."""
    zero = AugLagState(np.zeros_like(state.q), state.u, state.lam, state.c, state.beta)
    b = -grad_q(zero, problem)
    if cfg.preconditioner == "kron":
        precond = kron_precond_q(state, problem)
    else:
        precond = 1.0 / jacobi_q(state, problem).ravel()
    res = pcg(lambda v: hess_q(v.reshape(b.shape), state, problem).ravel(), b.ravel(),
              x0=state.q.ravel(), precond=precond, tol=cfg.pcg_tol, max_iter=cfg.pcg_max_iter)
    q = res.x.reshape(b.shape)
    if cfg.enforce_bounds:
        qn = np.clip(problem.nodal(q), cfg.q_min, cfg.q_max)
        q = problem.surplus(qn)
    return q, res.iterations


def solve_subproblem_u(state: AugLagState, problem: DiscreteProblem, cfg: RunConfig, u_hat):
    """Minimize L_c over u (boundary values held at zero) for fixed (q, lam)."""
    mask = problem.interior[:, None]
    zero = AugLagState(state.q, np.zeros_like(state.u), state.lam, state.c, state.beta)
    b = -grad_u(zero, problem, u_hat) * mask
    if cfg.preconditioner == "kron":
        precond = kron_precond_u(state, problem)
    else:
        precond = 1.0 / np.where(mask > 0, jacobi_u(state, problem), 1.0).ravel()
    shape = b.shape

    def apply(v):
        return (hess_u(v.reshape(shape) * mask, state, problem) * mask).ravel()

    res = pcg(apply, b.ravel(), x0=(state.u * mask).ravel(), precond=precond,
              tol=cfg.pcg_tol, max_iter=cfg.pcg_max_iter)
    return res.x.reshape(shape) * mask, res.iterations


# -- outer loop ---------------------------------------------------------------------------

@dataclass
class HistoryRecord:
    step: int
    pcg_iters_q: int
    pcg_iters_u: int
    l2_error: Optional[float]
    increment: float
    cost_functional: float
    auglag_functional: float
    constraint_norm: float
    penalty: float


@dataclass(eq=False)
class RunResult:
    state: AugLagState
    converged: bool
    history: list

    def table(self) -> list[dict]:
        return [asdict(h) for h in self.history]


def increment_norm(dq, problem: DiscreteProblem) -> float:
    return math.sqrt(max(_kron_form(dq, dq, problem.S, problem.spatial.mass_q), 0.0))


def constraint_norm(E, problem: DiscreteProblem) -> float:
    return math.sqrt(max(_kron_form(E, E, problem.S, problem.Ax), 0.0))


def initial_state(cfg: RunConfig, problem: DiscreteProblem, u_hat, q0=None) -> AugLagState:
    if q0 is None:
        q0 = np.zeros((problem.M_q, problem.N))
        q0[:, 0] = cfg.q_init          # level-1 basis function is the constant 1
    u0 = np.asarray(u_hat, dtype=float) * problem.interior[:, None]
    return AugLagState(np.array(q0, dtype=float), u0, np.zeros_like(u0), cfg.c0, cfg.beta)


def outer_step(state: AugLagState, cfg: RunConfig, u_hat, problem: DiscreteProblem,
               error_fn: Optional[Callable[[np.ndarray], float]] = None) -> HistoryRecord:
    """One splitting step: q-solve, u-solve, multiplier and penalty update (in place)."""
    q_prev = state.q
    state.q, it_q = solve_subproblem_q(state, problem, cfg, u_hat)
    state.u, it_u = solve_subproblem_u(state, problem, cfg, u_hat)
    E = constraint(state, problem)
    rec = HistoryRecord(
        step=state.k + 1,
        pcg_iters_q=it_q,
        pcg_iters_u=it_u,
        l2_error=error_fn(state.q) if error_fn else None,
        increment=increment_norm(state.q - q_prev, problem),
        cost_functional=cost_functional(state, u_hat, problem),
        auglag_functional=auglag_value(state, u_hat, problem),
        constraint_norm=constraint_norm(E, problem),
        penalty=state.c,
    )
    state.lam = state.lam + state.c * E
    state.c = min(state.c * cfg.c_growth, cfg.c_max)
    state.k += 1
    state.history.append(rec)
    return rec


def run(cfg: RunConfig, u_hat, problem: DiscreteProblem, q0=None,
        error_fn: Optional[Callable[[np.ndarray], float]] = None,
        on_step: Optional[Callable[[HistoryRecord], None]] = None,
        state: Optional[AugLagState] = None) -> RunResult:
    """Outer loop until the q-increment drops below ``cfg.outer_tol`` or ``cfg.max_outer`` steps.

    A caller-supplied ``state`` is advanced in place, so ``on_step`` can inspect it.
    """
    cfg.validate()
    u_hat = np.asarray(u_hat, dtype=float)
    if state is None:
        state = initial_state(cfg, problem, u_hat, q0)
    converged = False
    for _ in range(cfg.max_outer):
        rec = outer_step(state, cfg, u_hat, problem, error_fn)
        log.info("step %d: pcg %d/%d increment %.3e |e| %.3e",
                 rec.step, rec.pcg_iters_q, rec.pcg_iters_u, rec.increment, rec.constraint_norm)
        if on_step:
            on_step(rec)
        if rec.increment < cfg.outer_tol:
            converged = True
            break
    return RunResult(state, converged, state.history)
