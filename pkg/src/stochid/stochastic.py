"""Density models on the stochastic domain and the density-weighted forms.

All basis functions live on the unit cube. A product-uniform density on a
box [lo, hi]^n is the uniform density on [0,1]^n after the affine change
of variables Y = lo + (hi - lo) y, so its forms are computed in unit-cube
coordinates (derivatives are with respect to y). The empirical variant
averages over a sample set that already lies in [0,1]^n.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgument, Unsupported
from .sparse_grid import SparseGrid, basis_matrix, hat_1d, hat_1d_derivative, level_indices


@dataclass(eq=False)
class DensityModel:
    variant: str                         # "uniform" or "empirical"
    dim: int
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = None  # (n_samples, dim) in [0,1]^dim

    def __post_init__(self):
        if self.variant == "uniform":
            lo = np.zeros(self.dim) if self.lower is None else np.broadcast_to(np.asarray(self.lower, float), (self.dim,))
            hi = np.ones(self.dim) if self.upper is None else np.broadcast_to(np.asarray(self.upper, float), (self.dim,))
            if np.any(hi <= lo):
                raise InvalidArgument("uniform density needs upper > lower in every dimension")
            self.lower, self.upper = np.array(lo), np.array(hi)
        elif self.variant == "empirical":
            s = np.asarray(self.samples, dtype=float)
            if s.ndim != 2 or s.shape[1] != self.dim or s.shape[0] < 1:
                raise InvalidArgument("empirical density needs an (n_samples, dim) sample array")
            if np.any(s < 0) or np.any(s > 1):
                raise InvalidArgument("empirical samples must lie in the unit cube")
            self.samples = s
        else:
            raise InvalidArgument(f"unknown density variant {self.variant!r}")

    @classmethod
    def uniform(cls, dim, lower=0.0, upper=1.0):
        return cls("uniform", dim, lower=lower, upper=upper)

    @classmethod
    def empirical(cls, samples):
        s = np.asarray(samples, dtype=float)
        return cls("empirical", s.shape[1], samples=s)

    def to_physical(self, y):
        """Map unit-cube points to physical random-variable values (uniform variant)."""
        if self.variant != "uniform":
            raise Unsupported("physical mapping is only defined for the uniform variant")
        return self.lower + (self.upper - self.lower) * np.asarray(y, dtype=float)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Unit-cube points distributed according to the density."""
        if self.variant == "uniform":
            return rng.random((n, self.dim))
        return self.samples[rng.integers(0, self.samples.shape[0], size=n)]


@dataclass(eq=False)
class StochasticOperators:
    S_rho: np.ndarray
    S_mix: np.ndarray
    T_rho: np.ndarray   # (N, N, N), zero where supports do not overlap
    mean: np.ndarray    # int psi_j rho dy

    def export_coo(self, name: str) -> str:
        """Coordinate-list text dump (row col value) of S_rho / S_mix / mean."""
        A = {"S_rho": self.S_rho, "S_mix": self.S_mix, "mean": self.mean[:, None]}[name]
        r, c = np.nonzero(A)
        return "\n".join(f"{i} {j} {A[i, j]:.17g}" for i, j in zip(r, c))


def _check(grid: SparseGrid, rho: DensityModel):
    if grid.dim != rho.dim:
        raise InvalidArgument(f"density dimension {rho.dim} does not match grid dimension {grid.dim}")


# -- exact 1D tables for the uniform density -----------------------------------

def _tables_1d(level: int):
    """1D integrals over [0,1] of products of hats up to ``level``.

    Returns (pairs, s, d, t, m) with pairs a list of (level, index) and
    s = int psi_a psi_b, d = int psi_a' psi_b', t = int psi_a psi_b psi_c, m = int psi_a.
    Integrands are piecewise polynomials of degree <= 3 on the finest cells,
    so two Gauss points per cell are exact.
    """
    pairs = [(l, j) for l in range(1, level + 1) for j in level_indices(l)]
    ncell = 2 ** max(level - 1, 0)
    g, w = np.polynomial.legendre.leggauss(2)
    left = np.arange(ncell) / ncell
    pts = (left[:, None] + (g[None, :] + 1) / (2 * ncell)).ravel()
    wts = np.tile(w / (2 * ncell), ncell)
    V = np.array([hat_1d(l, j, pts) for l, j in pairs])
    D = np.array([hat_1d_derivative(l, j, pts) for l, j in pairs])
    s = (V * wts) @ V.T
    d = (D * wts) @ D.T
    t = np.einsum("aq,bq,cq,q->abc", V, V, V, wts)
    m = V @ wts
    return pairs, s, d, t, m


def _dim_maps(grid: SparseGrid, pairs):
    pos = {p: k for k, p in enumerate(pairs)}
    return [np.array([pos[(l, j)] for l, j in zip(grid.levels[:, t], grid.indices[:, t])])
            for t in range(grid.dim)]


def _uniform_forms(grid: SparseGrid):
    pairs, s, d, t, m = _tables_1d(grid.level)
    maps = _dim_maps(grid, pairs)
    N = grid.n_nodes
    S = np.ones((N, N))
    Smix = np.ones((N, N))
    T = np.ones((N, N, N))
    mean = np.ones(N)
    for a in maps:
        S *= s[np.ix_(a, a)]
        Smix *= (s + d)[np.ix_(a, a)]
        T *= t[np.ix_(a, a, a)]
        mean *= m[a]
    return S, Smix, T, mean


def _empirical_forms(grid: SparseGrid, rho: DensityModel):
    Y = rho.samples
    ns = Y.shape[0]
    B = basis_matrix(grid, Y)
    S = B.T @ B / ns
    T = np.einsum("sa,sb,sc->abc", B, B, B, optimize=True) / ns
    mean = B.mean(axis=0)
    # per-dimension factors psi_t(y) and psi_t'(y) for each node
    Smix = np.zeros_like(S)
    vals, ders = [], []
    for t in range(grid.dim):
        v = np.ones((ns, grid.n_nodes))
        dv = np.ones((ns, grid.n_nodes))
        for k in range(grid.n_nodes):
            l, j = grid.levels[k, t], grid.indices[k, t]
            v[:, k] = hat_1d(l, j, Y[:, t])
            dv[:, k] = hat_1d_derivative(l, j, Y[:, t])
        vals.append(v)
        ders.append(dv)
    for s0 in range(0, ns, 256):
        sl = slice(s0, s0 + 256)
        prod = np.ones((min(256, ns - s0), grid.n_nodes, grid.n_nodes))
        for v, dv in zip(vals, ders):
            prod *= v[sl, :, None] * v[sl, None, :] + dv[sl, :, None] * dv[sl, None, :]
        Smix += prod.sum(axis=0)
    return S, Smix / ns, T, mean


def assemble_stochastic_operators(grid: SparseGrid, rho: DensityModel, s: int = 1) -> StochasticOperators:
    _check(grid, rho)
    if s != 1:
        raise Unsupported("only mixed-derivative order s = 1 is implemented")
    if rho.variant == "uniform":
        S, Smix, T, mean = _uniform_forms(grid)
    else:
        S, Smix, T, mean = _empirical_forms(grid, rho)
    S = 0.5 * (S + S.T)
    Smix = 0.5 * (Smix + Smix.T)
    return StochasticOperators(S, Smix, T, mean)


def assemble_S_rho(grid: SparseGrid, rho: DensityModel) -> np.ndarray:
    return assemble_stochastic_operators(grid, rho).S_rho


def assemble_S_mix(grid: SparseGrid, rho: DensityModel, s: int = 1) -> np.ndarray:
    return assemble_stochastic_operators(grid, rho, s=s).S_mix


def assemble_T_rho(grid: SparseGrid, rho: DensityModel) -> np.ndarray:
    return assemble_stochastic_operators(grid, rho).T_rho


# -- Kronecker-structured products ----------------------------------------------

def apply_kron(S, A, v) -> np.ndarray:
    """(S kron A) v for v stacked node by node (column-major M x N layout)."""
    S = np.asarray(S)
    N, M = S.shape[0], A.shape[0]
    v = np.asarray(v, dtype=float)
    if S.shape != (N, N) or A.shape != (M, M) or v.size != M * N:
        raise InvalidArgument(f"apply_kron: shapes {S.shape}, {A.shape}, {v.shape} are inconsistent")
    V = v.reshape(N, M).T
    return np.asarray(A @ V @ S.T).T.ravel()


def kron_inner(V, W, S, A) -> float:
    """<V, W> in the S kron A inner product for M x N coefficient arrays."""
    return float(np.sum(V * (A @ W @ S.T)))


class CoupledForm:
    """Density- and field-weighted coupling of the spatial trilinear form.

    With weight slot "q" (weight Q on the coarse space) ``apply(U)`` returns
    the u-space array  sum_j K(Q[:, j]) U T[j];  with slot "u" (weight U on the
    fine space) it returns the q-space array whose (i, j) entry is
    sum_{j1,j2} T[j, j1, j2] U[:, j1]^T G[i] V[:, j2].
    """

    def __init__(self, ops: StochasticOperators, trilinear, weight, slot: str):
        weight = np.asarray(weight, dtype=float)
        N = ops.S_rho.shape[0]
        if slot == "q":
            expected = (trilinear.n_q, N)
        elif slot == "u":
            expected = (trilinear.n_u, N)
        else:
            raise InvalidArgument(f"weight slot must be 'q' or 'u', got {slot!r}")
        if weight.shape != expected:
            raise InvalidArgument(f"weight field shape {weight.shape} does not match slot {slot!r} {expected}")
        self.T = ops.T_rho
        self.G = trilinear
        self.weight = weight
        self.slot = slot
        self._active = [j for j in range(N) if np.any(self.T[j])]

    def apply(self, V) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        G, T = self.G, self.T
        if self.slot == "q":
            out = np.zeros((G.n_u, V.shape[1]))
            for j in self._active:
                out += G.matrix(self.weight[:, j]) @ (V @ T[j])
            return out
        out = np.zeros((G.n_q, T.shape[0]))
        for j in self._active:
            UT = self.weight @ T[j]
            out[:, j] = G.WT @ np.sum(UT[G.rows] * V[G.cols], axis=1)
        return out


def assemble_coupled_form(ops: StochasticOperators, trilinear, weight_field, weight_slot: str) -> CoupledForm:
    coeffs = getattr(weight_field, "coeffs", weight_field)
    return CoupledForm(ops, trilinear, coeffs, weight_slot)
