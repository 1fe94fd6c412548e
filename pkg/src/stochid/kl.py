"""Empirical Karhunen-Loeve analysis of sampled output fields.

The covariance operator is taken on H^1_0, which leads to the generalized
symmetric problem  A Sigma A b = nu A b  with A the Dirichlet stiffness
matrix. It is solved by the reduction A = L L^T, (L^T Sigma L) c = nu c,
b = L^{-T} c, so that B^T A B = I.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import DegenerateMode, InsufficientData, InvalidArgument


@dataclass(eq=False)
class SampleData:
    values: np.ndarray   # (M_u, N_sample)
    space: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidArgument("sample matrix must be two-dimensional")
        if self.values.shape[1] < 2:
            raise InsufficientData("at least two sample paths are required")
        if self.space is not None and self.values.shape[0] != self.space.n_dofs:
            raise InvalidArgument(
                f"sample matrix has {self.values.shape[0]} rows, space has {self.space.n_dofs} dofs")

    @classmethod
    def from_csv(cls, path, space=None) -> "SampleData":
        vals = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(vals, space)


@dataclass(eq=False)
class KlModel:
    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray      # (M_u, n) truncated modes
    rank: int
    y_samples: Optional[np.ndarray] = None      # (n, N_sample)
    marginal_cdfs: list = field(default_factory=list)   # sorted samples per dimension
    all_eigenvectors: Optional[np.ndarray] = field(default=None, repr=False)
    stiffness: object = field(default=None, repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenvectors": self.eigenvectors.tolist(),
            "rank": int(self.rank),
        })

    def field_at(self, y_physical) -> np.ndarray:
        """Truncated expansion m + B_n D^{1/2} Y for KL coordinates Y of shape (n, k)."""
        Y = np.asarray(y_physical, dtype=float).reshape(self.rank, -1)
        scale = np.sqrt(self.eigenvalues[:self.rank])
        return self.mean[:, None] + self.eigenvectors @ (scale[:, None] * Y)


def sample_stats(data: SampleData):
    U = data.values if isinstance(data, SampleData) else np.asarray(data, dtype=float)
    if U.shape[1] < 2:
        raise InsufficientData("at least two sample paths are required")
    m = U.mean(axis=1)
    C = U - m[:, None]
    return m, C @ C.T / U.shape[1]


def kl_decompose(sigma, stiffness):
    """All eigenpairs of Sigma A in descending order, A-orthonormal eigenvectors."""
    sigma = np.asarray(sigma, dtype=float)
    A = stiffness.toarray() if hasattr(stiffness, "toarray") else np.asarray(stiffness, dtype=float)
    scale = max(np.abs(sigma).max(), np.finfo(float).tiny)
    if not np.allclose(sigma, sigma.T, atol=1e-12 * scale, rtol=0):
        raise InvalidArgument("covariance matrix is not symmetric")
    L = np.linalg.cholesky(A)
    R = L.T @ (0.5 * (sigma + sigma.T)) @ L
    nu, c = np.linalg.eigh(0.5 * (R + R.T))
    order = np.argsort(nu)[::-1]
    nu, c = nu[order], c[:, order]
    top = max(nu[0], 0.0)
    if np.any(nu < -1e-12 * top) and top > 0:
        # only round-off is tolerated; anything larger means sigma was not PSD
        bad = nu.min()
        if bad < -1e-8 * top:
            raise InvalidArgument(f"covariance has a negative eigenvalue {bad:.3e}")
    nu = np.where(nu < 0, 0.0, nu)
    B = sla.solve_triangular(L.T, c, lower=False)
    idx = np.argmax(np.abs(B), axis=0)
    signs = np.sign(B[idx, np.arange(B.shape[1])])
    signs[signs == 0] = 1.0
    return nu, B * signs


def truncate(eigenvalues, tol: float) -> int:
    nu = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    total = nu.sum()
    if total <= 0:
        return 0
    # tail[n] = sum_{k >= n} nu_k
    tail = np.concatenate([np.cumsum(nu[::-1])[::-1], [0.0]])
    return int(np.flatnonzero(tail <= tol * total)[0])


def project_samples(data: SampleData, model: KlModel) -> np.ndarray:
    U = data.values if isinstance(data, SampleData) else np.asarray(data, dtype=float)
    n = model.rank
    nu = model.eigenvalues[:n]
    if n < 1:
        raise DegenerateMode("model rank is zero")
    if np.any(nu <= 0):
        raise DegenerateMode("zero eigenvalue inside the retained rank")
    A = model.stiffness
    centered = U - model.mean[:, None]
    return (model.eigenvectors.T @ (A @ centered)) / np.sqrt(nu)[:, None]


class EmpiricalCdf:
    """Midpoint-rank empirical CDF with linear interpolation between order statistics."""

    def __init__(self, samples):
        x = np.sort(np.asarray(samples, dtype=float))
        if x.size < 2:
            raise InsufficientData("empirical CDF needs at least two samples")
        self.sorted = x
        self.levels = (np.arange(1, x.size + 1) - 0.5) / x.size

    def __call__(self, y):
        return np.interp(y, self.sorted, self.levels)

    def inverse(self, u):
        return np.interp(u, self.levels, self.sorted)


def uniformize(y_samples):
    Y = np.atleast_2d(np.asarray(y_samples, dtype=float))
    if Y.shape[1] < 2:
        raise InsufficientData("at least two samples are required")
    cdfs = [EmpiricalCdf(row) for row in Y]
    U = np.vstack([F(row) for F, row in zip(cdfs, Y)])
    return cdfs, U


def analyze(data: SampleData, stiffness, tol: float = 1e-7, rank: Optional[int] = None,
            max_rank: Optional[int] = None) -> KlModel:
    """Full pipeline: moments, eigenpairs, truncation, projection, uniformization.

    ``rank`` fixes the truncation outright; ``max_rank`` only caps the rank chosen by ``tol``.
    """
    m, sigma = sample_stats(data)
    nu, B = kl_decompose(sigma, stiffness)
    n = truncate(nu, tol) if rank is None else int(rank)
    if max_rank is not None:
        n = min(n, int(max_rank))
    model = KlModel(mean=m, eigenvalues=nu, eigenvectors=B[:, :n], rank=n,
                    all_eigenvectors=B, stiffness=stiffness)
    if n >= 1:
        model.y_samples = project_samples(data, model)
        cdfs, _ = uniformize(model.y_samples)
        model.marginal_cdfs = cdfs
    return model
