"""Reference experiments: data synthesis, runs, error metrics and moments.

Example 1: 1D, four uniform [0,1] variables.
Example 2: unit square, three uniform [-1,1] variables, a forcing whose
    output is flat over the middle of the domain; run for two beta values.
Example 3: unit square, output samples only; random variables are recovered
    by a KL analysis of 1000 sample paths and uniformized marginally.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.sparse.linalg import splu

from . import kl
from .errors import InvalidArgument
from .fem import (FeSpace, apply_dirichlet, assemble_load, build_interval_mesh,
                  build_spatial_operators, build_unit_square_mesh, refine_uniform)
from .forward import DiscreteProblem
from .optimizer import RunConfig, RunResult, increment_norm, run
from .sparse_grid import basis_matrix, build_sparse_grid, hierarchize
from .stochastic import DensityModel, assemble_stochastic_operators

log = logging.getLogger(__name__)


# -- closed-form fields ---------------------------------------------------------------
# exact q takes vertex coordinates X (M, d) and physical variables Y (k, n), returns (M, k)

def _q_ex1(X, Y):
    x = X[:, 0]
    modes = np.stack([np.cos(i * np.pi * x) for i in range(1, 5)], axis=1)
    return (2 + x ** 2)[:, None] + 0.5 * modes @ Y.T


def _f_ex1(X):
    x = X[:, 0]
    return 6 * x ** 2 - 2 * x + 4


def _q_ex2(X, Y):
    x1, x2 = X[:, 0], X[:, 1]
    modes = np.stack([np.sin(i * np.pi * x1) * np.sin(i * np.pi * x2) for i in range(1, 4)], axis=1)
    return (2 + np.sin(x1 ** 2 * x2))[:, None] + modes @ Y.T / 8


def plateau(x):
    """Continuously differentiable bump: rises on [0,1/3], equals 1 on the middle third, falls to 0."""
    x = np.asarray(x, dtype=float)
    return np.where(x <= 1 / 3, -9 * x ** 2 + 6 * x,
                    np.where(x < 2 / 3, 1.0, -9 * x ** 2 + 12 * x - 3))


def plateau_d1(x):
    x = np.asarray(x, dtype=float)
    return np.where(x <= 1 / 3, -18 * x + 6, np.where(x < 2 / 3, 0.0, -18 * x + 12))


def plateau_d2(x):
    x = np.asarray(x, dtype=float)
    return np.where((x > 1 / 3) & (x < 2 / 3), 0.0, -18.0)


def _f_ex2(X):
    x1, x2 = X[:, 0], X[:, 1]
    k = 2 + np.sin(x1 ** 2 * x2)
    c = np.cos(x1 ** 2 * x2)
    kx1, kx2 = c * 2 * x1 * x2, c * x1 ** 2
    w1, w2 = plateau(x1), plateau(x2)
    d1, d2 = plateau_d1(x1), plateau_d1(x2)
    lap = plateau_d2(x1) * w2 + w1 * plateau_d2(x2)
    return -(k * lap + kx1 * d1 * w2 + kx2 * w1 * d2)


def _q_ex3(X, Y):
    x1, x2 = X[:, 0], X[:, 1]
    modes = np.stack([
        0.5 * np.sin(np.pi * x1) * np.sin(np.pi * x2),
        0.25 * np.cos(0.5 * np.pi * x1) * np.sin(0.5 * np.pi * x2),
        0.25 * np.cos(np.pi * x1) * np.cos(np.pi * x2),
    ], axis=1)
    return (4 + x1 * x2)[:, None] + modes @ Y.T


def _f_ex3(X):
    # -div((4 + x1 x2) grad(sin(pi x1) sin(pi x2)))
    x1, x2 = X[:, 0], X[:, 1]
    s1, s2 = np.sin(np.pi * x1), np.sin(np.pi * x2)
    c1, c2 = np.cos(np.pi * x1), np.cos(np.pi * x2)
    k = 4 + x1 * x2
    lap = -2 * np.pi ** 2 * s1 * s2
    grad_dot = x2 * np.pi * c1 * s2 + x1 * np.pi * s1 * c2
    return -(k * lap + grad_dot)


@dataclass
class ExampleSpec:
    id: int
    spatial_dim: int
    q_mesh_size: int              # elements (1D) or squares per side (2D)
    n: int                        # number of random variables in the exact q
    level: int
    y_lower: float
    y_upper: float
    delta: float
    beta: float
    outer_tol: float
    pcg_tol: float
    beta_variants: tuple = ()
    n_samples: int = 0            # Example 3 only
    kl_tol: float = 1e-7
    kl_rank: Optional[int] = None # caps the truncation rank chosen by kl_tol
    density: str = "uniform"      # Example 3: "uniform" (independent uniformized) or "empirical"
    max_outer: int = 20
    exact_q: Optional[Callable] = field(default=None, repr=False)
    forcing: Optional[Callable] = field(default=None, repr=False)

    def describe(self) -> dict:
        d = asdict(self)
        d.pop("exact_q")
        d.pop("forcing")
        d["beta_variants"] = list(self.beta_variants)
        return d


def make_example(example_id: int) -> ExampleSpec:
    if example_id == 1:
        return ExampleSpec(1, 1, 30, 4, 3, 0.0, 1.0, 1e-3, 5e-5, 1e-5, 1e-5,
                           exact_q=_q_ex1, forcing=_f_ex1)
    if example_id == 2:
        return ExampleSpec(2, 2, 14, 3, 4, -1.0, 1.0, 1e-3, 1e-5, 1e-4, 1e-5,
                           beta_variants=(1e-5, 1e-3), exact_q=_q_ex2, forcing=_f_ex2)
    if example_id == 3:
        return ExampleSpec(3, 2, 14, 3, 4, -1.0, 1.0, 0.0, 1e-5, 1e-5, 1e-6,
                           n_samples=1000, kl_tol=1e-7, kl_rank=2, exact_q=_q_ex3, forcing=_f_ex3)
    raise InvalidArgument(f"unknown example id {example_id!r}; expected 1, 2 or 3")


# -- discretization ---------------------------------------------------------------------

@dataclass(eq=False)
class Setup:
    spec: ExampleSpec
    space_q: FeSpace
    space_u: FeSpace
    spatial: object
    f: np.ndarray


def build_setup(spec: ExampleSpec) -> Setup:
    if spec.spatial_dim == 1:
        mq = build_interval_mesh(spec.q_mesh_size)
    else:
        mq = build_unit_square_mesh(spec.q_mesh_size)
    mu = refine_uniform(mq)
    space_q, space_u = FeSpace(mq), FeSpace(mu, dirichlet=True)
    spatial = build_spatial_operators(space_q, space_u)
    f = assemble_load(space_u, spec.forcing)
    return Setup(spec, space_q, space_u, spatial, f)


def build_problem(setup: Setup, n: int, level: int, density: DensityModel) -> DiscreteProblem:
    grid = build_sparse_grid(n, level)
    stoch = assemble_stochastic_operators(grid, density)
    return DiscreteProblem(setup.spatial, grid, density, stoch, setup.f)


def exact_q_surplus(spec: ExampleSpec, problem: DiscreteProblem, space_q: FeSpace) -> np.ndarray:
    """Nodal interpolant of the exact q on V_q at the grid nodes, hierarchized."""
    Y = problem.density.to_physical(problem.grid.coords)
    return hierarchize(problem.grid, spec.exact_q(space_q.mesh.vertices, Y))


def perturb(values, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative noise: v (1 + delta U), U ~ Uniform(-1, 1) entrywise."""
    if delta == 0:
        return np.array(values, dtype=float)
    return values * (1.0 + delta * rng.uniform(-1.0, 1.0, size=np.shape(values)))


def forward_paths(setup: Setup, Qn: np.ndarray) -> np.ndarray:
    """Deterministic solves for each column of nodal q values on V_q."""
    tri = setup.spatial.trilinear
    mask = setup.space_u.dirichlet_mask
    out = np.empty((setup.space_u.n_dofs, Qn.shape[1]))
    for j in range(Qn.shape[1]):
        if np.any(Qn[:, j] <= 0):
            raise InvalidArgument(f"exact coefficient is not positive for sample {j}")
        K = apply_dirichlet(tri.matrix(Qn[:, j]), mask)
        out[:, j] = splu(K.tocsc()).solve(setup.f)
    return out


def synthesize_data(spec: ExampleSpec, seed: int, setup: Setup, problem: Optional[DiscreteProblem] = None):
    """Surplus array of u_hat (Examples 1-2) or a SampleData set (Example 3)."""
    rng = np.random.default_rng(seed)
    if spec.id == 3:
        Y = rng.uniform(spec.y_lower, spec.y_upper, size=(spec.n_samples, spec.n))
        Qn = spec.exact_q(setup.space_q.mesh.vertices, Y)
        U = perturb(forward_paths(setup, Qn), spec.delta, rng)
        return kl.SampleData(U, setup.space_u)
    Y = problem.density.to_physical(problem.grid.coords)
    Qn = spec.exact_q(setup.space_q.mesh.vertices, Y)
    Un = perturb(forward_paths(setup, Qn), spec.delta, rng)
    return hierarchize(problem.grid, Un)


def kl_data_field(model: kl.KlModel, grid) -> np.ndarray:
    """Surplus array of the truncated KL expansion, in uniformized coordinates."""
    Yphys = np.vstack([F.inverse(grid.coords[:, k]) for k, F in enumerate(model.marginal_cdfs)])
    return hierarchize(grid, model.field_at(Yphys))


# -- metrics ---------------------------------------------------------------------------

def error_metric(q_hat, q_exact_surplus, problem: DiscreteProblem) -> float:
    """L2(D x Gamma) norm of the difference in the (S kron A^q) form."""
    return increment_norm(np.asarray(q_hat) - q_exact_surplus, problem)


def h1_seminorm(coeffs, stiffness) -> float:
    return float(np.sqrt(max(coeffs @ (stiffness @ coeffs), 0.0)))


def l2_norm(coeffs, mass) -> float:
    return float(np.sqrt(max(coeffs @ (mass @ coeffs), 0.0)))


def moment_fields(evaluate: Callable[[np.random.Generator, int], np.ndarray], n_mc: int,
                  seed: int, chunk: int = 10000) -> dict:
    """Mean and central moments 2..4 of a random field by seeded Monte Carlo.

    ``evaluate(rng, k)`` draws k realizations as an (M, k) array. Chunks use
    independent streams spawned from ``seed`` and the same streams are
    replayed in the second (centered) pass, so results do not depend on
    how the chunks are scheduled.
    """
    sizes = [min(chunk, n_mc - s) for s in range(0, n_mc, chunk)]
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    total = None
    for ss, k in zip(seqs, sizes):
        vals = evaluate(np.random.default_rng(ss), k)
        total = vals.sum(axis=1) if total is None else total + vals.sum(axis=1)
    mu = total / n_mc
    acc = {2: 0.0, 3: 0.0, 4: 0.0}
    for ss, k in zip(seqs, sizes):
        d = evaluate(np.random.default_rng(ss), k) - mu[:, None]
        for p in acc:
            acc[p] = acc[p] + np.sum(d ** p, axis=1)
    out = {1: mu}
    out.update({p: acc[p] / n_mc for p in acc})
    return out


def central_moments(field, k: int, density: DensityModel, n_mc: int, seed: int) -> np.ndarray:
    """k-th central moment (mean for k = 1) of a surplus field under ``density``."""
    if k not in (1, 2, 3, 4):
        raise InvalidArgument("moment order must be 1, 2, 3 or 4")
    coeffs = getattr(field, "coeffs", field)
    grid = field.grid

    def evaluate(rng, m):
        return coeffs @ basis_matrix(grid, density.draw(rng, m)).T

    return moment_fields(evaluate, n_mc, seed)[k]


def exact_moments(spec: ExampleSpec, X: np.ndarray, n_mc: int, seed: int) -> dict:
    def evaluate(rng, m):
        return spec.exact_q(X, rng.uniform(spec.y_lower, spec.y_upper, size=(m, spec.n)))
    return moment_fields(evaluate, n_mc, seed)


# -- driver ------------------------------------------------------------------------------

TABLE_COLUMNS = ["step", "pcg_iters_q", "pcg_iters_u", "l2_error", "increment",
                 "cost_functional", "auglag_functional", "constraint_norm", "penalty"]


class ConvergenceWriter:
    """Writes the convergence table row by row, flushing after each step."""

    def __init__(self, path: Path):
        self.fh = open(path, "w", newline="")
        self.w = csv.DictWriter(self.fh, fieldnames=TABLE_COLUMNS)
        self.w.writeheader()
        self.fh.flush()

    def __call__(self, rec):
        row = asdict(rec)
        self.w.writerow({k: ("" if row[k] is None else row[k]) for k in TABLE_COLUMNS})
        self.fh.flush()

    def close(self):
        self.fh.close()


def _write_vector_csv(path: Path, X: np.ndarray, values: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["x"] if X.shape[1] == 1 else ["x1", "x2"]
        w.writerow(cols + ["value"])
        for xi, v in zip(X, values):
            w.writerow([*(f"{c:.12g}" for c in xi), f"{v:.17g}"])


def run_config_for(spec: ExampleSpec, **overrides) -> RunConfig:
    cfg = RunConfig(beta=spec.beta, outer_tol=spec.outer_tol, pcg_tol=spec.pcg_tol, max_outer=spec.max_outer)
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


@dataclass(eq=False)
class ExperimentResult:
    spec: ExampleSpec
    result: RunResult
    problem: DiscreteProblem
    setup: Setup
    q_exact: Optional[np.ndarray]
    u_hat: np.ndarray
    final_error: Optional[float]
    kl_model: Optional[kl.KlModel] = None


def prepare_kl(spec: ExampleSpec, setup: Setup, samples: kl.SampleData):
    """KL-analyze samples and build the problem driven by the reduced field."""
    kl_model = kl.analyze(samples, setup.spatial.stiff_u_bc, tol=spec.kl_tol, max_rank=spec.kl_rank)
    if kl_model.rank < 1:
        raise InvalidArgument("KL analysis found no variance in the data")
    if spec.density == "empirical":
        _, U = kl.uniformize(kl_model.y_samples)
        density = DensityModel.empirical(U.T)
    else:
        density = DensityModel.uniform(kl_model.rank)
    problem = build_problem(setup, kl_model.rank, spec.level, density)
    return kl_model, problem, kl_data_field(kl_model, problem.grid)


def _execute(spec, setup, problem, u_hat, cfg, out_dir, n_mc, seed, meta, t0,
             error_fn=None, q_exact=None, kl_model=None) -> ExperimentResult:
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run.json").write_text(json.dumps({**meta, "status": "running"}, indent=2))
        writer = ConvergenceWriter(out_dir / "convergence.csv")
    t1 = time.perf_counter()
    try:
        result = run(cfg, u_hat, problem, error_fn=error_fn, on_step=writer)
    finally:
        if writer is not None:
            writer.close()
    t2 = time.perf_counter()
    final_error = error_fn(result.state.q) if error_fn else None

    if out_dir is not None:
        X = setup.space_q.mesh.vertices
        if n_mc > 0:
            qz, density = result.state.q, problem.density
            ident = moment_fields(lambda rng, m: qz @ basis_matrix(problem.grid, density.draw(rng, m)).T,
                                  n_mc, seed + 2)
            ex = exact_moments(spec, X, n_mc, seed + 1) if spec.exact_q is not None else None
            for k in range(1, 5):
                if ex is not None:
                    _write_vector_csv(out_dir / f"moments_exact_k{k}.csv", X, ex[k])
                _write_vector_csv(out_dir / f"moments_identified_k{k}.csv", X, ident[k])
        meta.update({
            "status": "converged" if result.converged else "not_converged",
            "outer_iterations": len(result.history),
            "final_l2_error": final_error,
            "grid_nodes": problem.N,
            "dofs_q": problem.M_q,
            "dofs_u": problem.M_u,
            "timings_s": {"setup": t1 - t0, "optimization": t2 - t1, "total": time.perf_counter() - t0},
        })
        if kl_model is not None:
            meta["kl"] = {"rank": kl_model.rank, "eigenvalues": kl_model.eigenvalues[:10].tolist(),
                          "density": spec.density}
        (out_dir / "run.json").write_text(json.dumps(meta, indent=2))
    return ExperimentResult(spec, result, problem, setup, q_exact, u_hat, final_error, kl_model)


def identify_from_samples(spec: ExampleSpec, setup: Setup, samples: kl.SampleData,
                          cfg: RunConfig, out_dir: Optional[Path] = None, n_mc: int = 0,
                          seed: int = 0, extra_meta: Optional[dict] = None) -> ExperimentResult:
    """Identify q from observed samples of u (KL reduction, then the optimizer)."""
    cfg = cfg.validate()
    t0 = time.perf_counter()
    meta = {"example": spec.describe(), "config": asdict(cfg), "seed": seed,
            "n_samples": samples.values.shape[1], "table_columns": TABLE_COLUMNS, **(extra_meta or {})}
    kl_model, problem, u_hat = prepare_kl(spec, setup, samples)
    return _execute(spec, setup, problem, u_hat, cfg, out_dir, n_mc, seed, meta, t0, kl_model=kl_model)


def run_example(spec: ExampleSpec, seed: int = 0, cfg: Optional[RunConfig] = None,
                out_dir: Optional[Path] = None, n_mc: int = 0, extra_meta: Optional[dict] = None) -> ExperimentResult:
    """Synthesize data, identify q, and optionally write the output directory."""
    cfg = (cfg or run_config_for(spec)).validate()
    t0 = time.perf_counter()
    meta = {"example": spec.describe(), "config": asdict(cfg), "seed": seed,
            "table_columns": TABLE_COLUMNS, **(extra_meta or {})}
    setup = build_setup(spec)
    if spec.id == 3:
        samples = synthesize_data(spec, seed, setup)
        kl_model, problem, u_hat = prepare_kl(spec, setup, samples)
        return _execute(spec, setup, problem, u_hat, cfg, out_dir, n_mc, seed, meta, t0, kl_model=kl_model)
    density = DensityModel.uniform(spec.n, spec.y_lower, spec.y_upper)
    problem = build_problem(setup, spec.n, spec.level, density)
    u_hat = synthesize_data(spec, seed, setup, problem)
    q_exact = exact_q_surplus(spec, problem, setup.space_q)
    return _execute(spec, setup, problem, u_hat, cfg, out_dir, n_mc, seed, meta, t0,
                    error_fn=lambda q: error_metric(q, q_exact, problem), q_exact=q_exact)
