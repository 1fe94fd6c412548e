"""Nested sparse grids on [0,1]^n with hierarchical hat bases.

1D hierarchy: level 1 is the single node 0.5 with the constant basis
function; level 2 adds the endpoints 0 and 1; level l >= 3 adds the odd
multiples of 2^(1-l). For l >= 2 the index j is the numerator of the node
coordinate y = j / 2^(l-1) (so level 2 uses j = 0 and j = 2) and the hat
has half-width 2^(1-l).

Fields on the grid are M x N arrays (rows: spatial dofs, columns: nodes).
``hierarchize`` maps nodal values to surpluses, ``dehierarchize`` back.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .errors import InvalidArgument


def level_indices(level: int) -> list[int]:
    if level == 1:
        return [1]
    if level == 2:
        return [0, 2]
    return list(range(1, 2 ** (level - 1), 2))


def node_coordinate(level: int, index: int) -> float:
    if level == 1:
        return 0.5
    return index / 2 ** (level - 1)


def coordinate_to_pair(c: Fraction) -> tuple[int, int]:
    """(level, index) of the 1D node at the dyadic coordinate c."""
    if c == Fraction(1, 2):
        return 1, 1
    if c == 0 or c == 1:
        return 2, 2 * int(c)
    den = c.denominator  # power of two, >= 4
    return den.bit_length(), c.numerator


def hat_1d(level: int, index: int, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if level == 1:
        return np.ones_like(y)
    s = 2.0 ** (level - 1)
    return np.maximum(0.0, 1.0 - np.abs(s * y - index))


def hat_1d_derivative(level: int, index: int, y: np.ndarray) -> np.ndarray:
    """Weak derivative; at kinks the right-sided value is returned."""
    y = np.asarray(y, dtype=float)
    if level == 1:
        return np.zeros_like(y)
    s = 2.0 ** (level - 1)
    t = s * y - index
    out = np.zeros_like(y)
    out[(t >= -1.0) & (t < 0.0)] = s
    out[(t >= 0.0) & (t < 1.0)] = -s
    # right endpoint of the domain: use the left-sided slope
    at_one = y >= 1.0
    out[at_one & (t > -1.0) & (t <= 0.0)] = s
    out[at_one & (t > 0.0) & (t <= 1.0)] = -s
    return out


@dataclass(eq=False)
class SparseGrid:
    dim: int
    level: int
    levels: np.ndarray     # (N, dim)
    indices: np.ndarray    # (N, dim)
    coords: np.ndarray     # (N, dim)
    ancestors: list = field(repr=False, default_factory=list)  # per node, per dim: [(node, weight), ...]

    @property
    def n_nodes(self) -> int:
        return self.levels.shape[0]

    @cached_property
    def _lookup(self) -> dict:
        return {(tuple(l), tuple(j)): k for k, (l, j) in
                enumerate(zip(self.levels.tolist(), self.indices.tolist()))}

    def find(self, levels, indices) -> int:
        return self._lookup[(tuple(levels), tuple(indices))]

    @cached_property
    def sweep_matrices(self) -> list:
        """Per-dimension 1D hierarchization operators I - A_t (unit lower triangular)."""
        N = self.n_nodes
        mats = []
        for t in range(self.dim):
            rows, cols, vals = list(range(N)), list(range(N)), [1.0] * N
            for k in range(N):
                for a, w in self.ancestors[k][t]:
                    rows.append(k)
                    cols.append(a)
                    vals.append(-w)
            mats.append(sp.csr_matrix((vals, (rows, cols)), shape=(N, N)))
        return mats

    @cached_property
    def hierarchization_matrix(self) -> sp.csr_matrix:
        Hm = sp.identity(self.n_nodes, format="csr")
        for m in self.sweep_matrices:
            Hm = m @ Hm
        return Hm.tocsr()

    @cached_property
    def evaluation_matrix(self) -> np.ndarray:
        """P[k, j] = psi_j(y_k) at the grid's own nodes."""
        return basis_matrix(self, self.coords)

    def to_json(self) -> str:
        return json.dumps({
            "dim": self.dim,
            "level": self.level,
            "levels": self.levels.tolist(),
            "indices": self.indices.tolist(),
            "coords": self.coords.tolist(),
        })


def build_sparse_grid(n: int, L: int) -> SparseGrid:
    if int(n) < 1 or int(L) < 1:
        raise InvalidArgument("sparse grid needs n >= 1 and L >= 1")
    n, L = int(n), int(L)
    multilevels = [l for l in itertools.product(range(1, L + 1), repeat=n) if sum(l) <= L + n - 1]
    multilevels.sort(key=lambda l: (sum(l), l))
    levs, idxs = [], []
    for l in multilevels:
        for j in itertools.product(*(level_indices(lt) for lt in l)):
            levs.append(l)
            idxs.append(j)
    levels = np.array(levs, dtype=np.int64).reshape(-1, n)
    indices = np.array(idxs, dtype=np.int64).reshape(-1, n)
    coords = np.vectorize(node_coordinate)(levels, indices).astype(float).reshape(-1, n)
    grid = SparseGrid(n, L, levels, indices, coords)
    grid.ancestors = [_ancestors(grid, k) for k in range(grid.n_nodes)]
    return grid


def _ancestors(grid: SparseGrid, k: int) -> list:
    """1D hierarchical parents of node k along each dimension, with interpolation weights."""
    l = grid.levels[k].tolist()
    j = grid.indices[k].tolist()
    out = []
    for t in range(grid.dim):
        if l[t] == 1:
            out.append([])
            continue
        if l[t] == 2:
            parents = [((1, 1), 1.0)]
        else:
            c = Fraction(j[t], 2 ** (l[t] - 1))
            h = Fraction(1, 2 ** (l[t] - 1))
            parents = [(coordinate_to_pair(c - h), 0.5), (coordinate_to_pair(c + h), 0.5)]
        entries = []
        for (lt, jt), w in parents:
            ll, jj = list(l), list(j)
            ll[t], jj[t] = lt, jt
            entries.append((grid.find(ll, jj), w))
        out.append(entries)
    return out


def _check_points(grid: SparseGrid, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[1] != grid.dim:
        raise InvalidArgument(f"points must have {grid.dim} coordinates")
    if np.any(y < 0.0) or np.any(y > 1.0) or not np.all(np.isfinite(y)):
        raise InvalidArgument("stochastic point outside the unit cube")
    return y


def basis_matrix(grid: SparseGrid, y, derivative_dims=None) -> np.ndarray:
    """B[s, j] = psi_j(y_s); with ``derivative_dims`` the listed dims are differentiated."""
    y = _check_points(grid, y)
    B = np.ones((y.shape[0], grid.n_nodes))
    deriv = set(derivative_dims or ())
    for t in range(grid.dim):
        pairs = sorted(set(zip(grid.levels[:, t].tolist(), grid.indices[:, t].tolist())))
        for lt, jt in pairs:
            cols = np.flatnonzero((grid.levels[:, t] == lt) & (grid.indices[:, t] == jt))
            f = hat_1d_derivative if t in deriv else hat_1d
            B[:, cols] *= f(lt, jt, y[:, t])[:, None]
    return B


def eval_basis(grid: SparseGrid, y):
    """Indices and values of the basis functions that do not vanish at y."""
    row = basis_matrix(grid, np.asarray(y, dtype=float).reshape(1, -1))[0]
    nz = np.flatnonzero(row != 0.0)
    return nz, row[nz]


def _check_field(grid: SparseGrid, values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    if values.shape[1] != grid.n_nodes:
        raise InvalidArgument(f"field has {values.shape[1]} columns, grid has {grid.n_nodes} nodes")
    return values


def hierarchize(grid: SparseGrid, nodal_values) -> np.ndarray:
    V = _check_field(grid, nodal_values)
    out = V.T.copy()
    for m in grid.sweep_matrices:
        out = m @ out
    return out.T


def dehierarchize(grid: SparseGrid, surpluses) -> np.ndarray:
    Z = _check_field(grid, surpluses)
    out = Z.T.copy()
    for m in reversed(grid.sweep_matrices):
        out = spsolve_triangular(m, out, lower=True, unit_diagonal=True)
    return np.asarray(out).reshape(Z.shape[1], Z.shape[0]).T


@dataclass(eq=False)
class SurplusField:
    space: object   # FeSpace
    grid: SparseGrid
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.n_dofs, self.grid.n_nodes):
            raise InvalidArgument(
                f"coefficient shape {self.coeffs.shape} does not match "
                f"({self.space.n_dofs}, {self.grid.n_nodes})")

    def nodal(self) -> np.ndarray:
        return self.coeffs @ self.grid.evaluation_matrix.T

    def at_y(self, y) -> np.ndarray:
        """Spatial coefficient vectors at stochastic points, shape (M, n_points)."""
        return self.coeffs @ basis_matrix(self.grid, y).T


def interpolate(field: SurplusField, x, y) -> float:
    idx, phi = field.space.basis_at(x)
    jdx, psi = eval_basis(field.grid, y)
    return float(phi @ field.coeffs[np.ix_(idx, jdx)] @ psi)
