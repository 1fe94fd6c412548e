"""P1 finite elements on uniform meshes of [0,1] and [0,1]^2.

Meshes are stored as plain arrays. ``refine_uniform`` keeps the coarse
vertices first (same indices) and appends edge midpoints, and records the
coarse mesh as ``parent``; children of coarse element ``e`` are
``e * nchild ... e * nchild + nchild - 1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument

_BOUNDARY_TOL = 1e-12


@dataclass(eq=False)
class Mesh:
    dim: int
    vertices: np.ndarray
    elements: np.ndarray
    boundary_vertices: np.ndarray
    parent: Optional["Mesh"] = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def validate(self):
        if self.dim not in (1, 2):
            raise InvalidArgument(f"mesh dimension must be 1 or 2, got {self.dim}")
        if self.vertices.shape[1] != self.dim or self.elements.shape[1] != self.dim + 1:
            raise InvalidArgument("vertex/element array shapes do not match dim")
        if self.elements.min() < 0 or self.elements.max() >= self.n_vertices:
            raise InvalidArgument("element vertex index out of range")
        srt = np.sort(self.elements, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise InvalidArgument("element with repeated vertex")
        meas = element_measures(self, signed=True)
        if np.any(meas <= 0):
            raise InvalidArgument("element with non-positive orientation")
        expected = _geometric_boundary(self.vertices)
        if not np.array_equal(np.sort(self.boundary_vertices), expected):
            raise InvalidArgument("boundary_vertices does not match the domain boundary")
        return self

    def to_json(self) -> str:
        return json.dumps({
            "dim": self.dim,
            "vertices": self.vertices.tolist(),
            "elements": self.elements.tolist(),
            "boundary_vertices": self.boundary_vertices.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "Mesh":
        d = json.loads(text)
        return cls(
            dim=int(d["dim"]),
            vertices=np.asarray(d["vertices"], dtype=float).reshape(-1, int(d["dim"])),
            elements=np.asarray(d["elements"], dtype=np.int64),
            boundary_vertices=np.asarray(d["boundary_vertices"], dtype=np.int64),
        ).validate()


def _geometric_boundary(vertices):
    on = np.any((np.abs(vertices) < _BOUNDARY_TOL) | (np.abs(vertices - 1.0) < _BOUNDARY_TOL), axis=1)
    return np.flatnonzero(on)


def build_interval_mesh(n_elems: int) -> Mesh:
    if int(n_elems) < 1:
        raise InvalidArgument("n_elems must be >= 1")
    n_elems = int(n_elems)
    x = np.arange(n_elems + 1, dtype=float) / n_elems
    elems = np.column_stack([np.arange(n_elems), np.arange(1, n_elems + 1)])
    return Mesh(1, x[:, None], elems, np.array([0, n_elems])).validate()


def build_unit_square_mesh(n_per_side: int) -> Mesh:
    """Uniform triangulation; every square is cut along its bottom-left to top-right diagonal."""
    if int(n_per_side) < 1:
        raise InvalidArgument("n_per_side must be >= 1")
    n = int(n_per_side)
    t = np.arange(n + 1, dtype=float) / n
    xx, yy = np.meshgrid(t, t)  # vertex (i, j) -> index j*(n+1) + i
    verts = np.column_stack([xx.ravel(), yy.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elems = np.empty((2 * n * n, 3), dtype=np.int64)
    elems[0::2] = lower
    elems[1::2] = upper
    return Mesh(2, verts, elems, _geometric_boundary(verts)).validate()


def refine_uniform(mesh: Mesh) -> Mesh:
    """Bisect every interval / split every triangle into 4 congruent children."""
    nv = mesh.n_vertices
    el = mesh.elements
    if mesh.dim == 1:
        mids = 0.5 * (mesh.vertices[el[:, 0]] + mesh.vertices[el[:, 1]])
        m = nv + np.arange(el.shape[0])
        children = np.empty((2 * el.shape[0], 2), dtype=np.int64)
        children[0::2] = np.column_stack([el[:, 0], m])
        children[1::2] = np.column_stack([m, el[:, 1]])
        verts = np.vstack([mesh.vertices, mids])
    else:
        local_edges = [(0, 1), (1, 2), (2, 0)]
        e_all = np.vstack([np.sort(el[:, list(le)], axis=1) for le in local_edges])
        edges, inv = np.unique(e_all, axis=0, return_inverse=True)
        inv = inv.reshape(3, -1).T  # (ne, 3): edge ids of (01, 12, 20)
        mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
        m01, m12, m20 = (nv + inv[:, k] for k in range(3))
        v0, v1, v2 = el[:, 0], el[:, 1], el[:, 2]
        children = np.empty((4 * el.shape[0], 3), dtype=np.int64)
        children[0::4] = np.column_stack([v0, m01, m20])
        children[1::4] = np.column_stack([m01, v1, m12])
        children[2::4] = np.column_stack([m20, m12, v2])
        children[3::4] = np.column_stack([m01, m12, m20])
        verts = np.vstack([mesh.vertices, mids])
    fine = Mesh(mesh.dim, verts, children, _geometric_boundary(verts), parent=mesh)
    return fine.validate()


def element_measures(mesh: Mesh, signed: bool = False) -> np.ndarray:
    p = mesh.vertices[mesh.elements]
    if mesh.dim == 1:
        meas = p[:, 1, 0] - p[:, 0, 0]
    else:
        a = p[:, 1] - p[:, 0]
        b = p[:, 2] - p[:, 0]
        meas = 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    return meas if signed else np.abs(meas)


def element_gradients(mesh: Mesh) -> np.ndarray:
    """Gradients of the local P1 shape functions, shape (n_elements, dim+1, dim)."""
    p = mesh.vertices[mesh.elements]
    if mesh.dim == 1:
        h = p[:, 1, 0] - p[:, 0, 0]
        return np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]
    B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are edge vectors
    Binv = np.linalg.inv(B)
    g12 = Binv  # row k = grad of barycentric k+1
    g0 = -g12.sum(axis=1, keepdims=True)
    return np.concatenate([g0, g12], axis=1)


class FeSpace:
    """P1 space on a mesh; dofs are the mesh vertices."""

    def __init__(self, mesh: Mesh, dirichlet: bool = False):
        self.mesh = mesh
        self.dirichlet = bool(dirichlet)
        self.n_dofs = mesh.n_vertices
        self.dirichlet_mask = np.zeros(self.n_dofs, dtype=bool)
        if self.dirichlet:
            self.dirichlet_mask[mesh.boundary_vertices] = True

    @property
    def interior(self) -> np.ndarray:
        return ~self.dirichlet_mask

    def interpolate(self, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return np.asarray(func(self.mesh.vertices), dtype=float)

    def locate(self, x):
        """Return (element index, barycentric coordinates) of the element containing x."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.mesh.dim,):
            raise InvalidArgument(f"point must have {self.mesh.dim} coordinates")
        if np.any(x < -_BOUNDARY_TOL) or np.any(x > 1 + _BOUNDARY_TOL):
            raise InvalidArgument(f"point {x.tolist()} outside the unit domain")
        p = self.mesh.vertices[self.mesh.elements]
        if self.mesh.dim == 1:
            t = (x[0] - p[:, 0, 0]) / (p[:, 1, 0] - p[:, 0, 0])
            bary = np.column_stack([1 - t, t])
        else:
            B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
            lam = np.linalg.solve(B, (x - p[:, 0])[:, :, None])[:, :, 0]
            bary = np.column_stack([1 - lam.sum(axis=1), lam])
        ok = np.flatnonzero(bary.min(axis=1) >= -1e-10)
        e = int(ok[0])
        return e, np.clip(bary[e], 0.0, 1.0)

    def basis_at(self, x):
        """Indices and values of the basis functions that are nonzero at x."""
        e, bary = self.locate(x)
        return self.mesh.elements[e].copy(), bary

    def evaluate(self, coeffs, x) -> float:
        idx, val = self.basis_at(x)
        return float(np.dot(np.asarray(coeffs)[idx], val))


def _coo_assemble(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    el = mesh.elements
    k = el.shape[1]
    rows = np.repeat(el, k, axis=1).ravel()
    cols = np.tile(el, (1, k)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def local_mass(mesh: Mesh) -> np.ndarray:
    d = mesh.dim
    meas = element_measures(mesh)
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    return meas[:, None, None] * ref[None]


def local_stiffness(mesh: Mesh) -> np.ndarray:
    g = element_gradients(mesh)
    return element_measures(mesh)[:, None, None] * np.einsum("eak,ebk->eab", g, g)


def assemble_mass(space: FeSpace) -> sp.csr_matrix:
    return _coo_assemble(space.mesh, local_mass(space.mesh))


def apply_dirichlet(matrix, mask) -> sp.csr_matrix:
    """Replace the masked rows and columns by identity rows/columns."""
    mask = np.asarray(mask, dtype=bool)
    keep = sp.diags((~mask).astype(float))
    return (keep @ sp.csr_matrix(matrix) @ keep + sp.diags(mask.astype(float))).tocsr()


def assemble_stiffness(space: FeSpace, apply_bc: bool = False) -> sp.csr_matrix:
    A = _coo_assemble(space.mesh, local_stiffness(space.mesh))
    if apply_bc:
        mask = np.zeros(space.n_dofs, dtype=bool)
        mask[space.mesh.boundary_vertices] = True
        A = apply_dirichlet(A, mask)
    return A


# -- quadrature ---------------------------------------------------------------

def _quadrature(dim: int, degree: int = 4):
    """Reference rule in barycentric coordinates, weights summing to 1."""
    if dim == 1:
        npt = max(1, (degree + 2) // 2)
        t, w = np.polynomial.legendre.leggauss(npt)
        t = 0.5 * (t + 1.0)
        return np.column_stack([1 - t, t]), 0.5 * w
    if degree > 4:
        raise InvalidArgument("triangle rule available up to degree 4")
    a, b = 0.445948490915965, 0.091576213509771
    wa, wb = 0.223381589678011, 0.109951743655322
    bary = np.array([
        [a, a, 1 - 2 * a], [a, 1 - 2 * a, a], [1 - 2 * a, a, a],
        [b, b, 1 - 2 * b], [b, 1 - 2 * b, b], [1 - 2 * b, b, b],
    ])
    return bary, np.array([wa] * 3 + [wb] * 3)


def quadrature_points(mesh: Mesh, degree: int = 4):
    """Physical quadrature points (ne, nq, dim), weights (ne, nq), shape values (nq, dim+1)."""
    bary, w = _quadrature(mesh.dim, degree)
    p = mesh.vertices[mesh.elements]  # (ne, d+1, d)
    pts = np.einsum("qa,ead->eqd", bary, p)
    weights = element_measures(mesh)[:, None] * w[None, :]
    return pts, weights, bary


def assemble_load(space: FeSpace, f: Callable[[np.ndarray], np.ndarray], apply_bc: bool = True) -> np.ndarray:
    """Load vector int f phi_i dx with a degree-4 element rule; f takes an (n, dim) array."""
    mesh = space.mesh
    pts, wts, bary = quadrature_points(mesh)
    ne, nq, d = pts.shape
    fv = np.asarray(f(pts.reshape(-1, d)), dtype=float).reshape(ne, nq)
    local = np.einsum("eq,eq,qa->ea", fv, wts, bary)
    b = np.zeros(space.n_dofs)
    np.add.at(b, mesh.elements, local)
    if apply_bc:
        b[mesh.boundary_vertices] = 0.0
    return b


def l2_error(space: FeSpace, coeffs, exact: Callable[[np.ndarray], np.ndarray]) -> float:
    mesh = space.mesh
    pts, wts, bary = quadrature_points(mesh)
    ne, nq, d = pts.shape
    uh = np.einsum("qa,ea->eq", bary, np.asarray(coeffs)[mesh.elements])
    ue = np.asarray(exact(pts.reshape(-1, d)), dtype=float).reshape(ne, nq)
    return float(np.sqrt(np.sum(wts * (uh - ue) ** 2)))


# -- coarse/fine coupling -------------------------------------------------------

def prolongation(coarse: Mesh, fine: Mesh) -> sp.csr_matrix:
    """Matrix mapping coarse P1 coefficients to their values at fine vertices."""
    if fine.parent is not coarse:
        ref = refine_uniform(coarse)
        if not (ref.vertices.shape == fine.vertices.shape
                and np.allclose(ref.vertices, fine.vertices)
                and np.array_equal(ref.elements, fine.elements)):
            raise InvalidArgument("fine mesh is not the uniform refinement of the coarse mesh")
    nchild = 2 if coarse.dim == 1 else 4
    parent_el = np.arange(fine.n_elements) // nchild
    P = sp.lil_matrix((fine.n_vertices, coarse.n_vertices))
    seen = np.zeros(fine.n_vertices, dtype=bool)
    cp = coarse.vertices[coarse.elements]
    for ef in range(fine.n_elements):
        ec = parent_el[ef]
        for v in fine.elements[ef]:
            if seen[v]:
                continue
            x = fine.vertices[v]
            if coarse.dim == 1:
                t = (x[0] - cp[ec, 0, 0]) / (cp[ec, 1, 0] - cp[ec, 0, 0])
                bary = np.array([1 - t, t])
            else:
                B = np.column_stack([cp[ec, 1] - cp[ec, 0], cp[ec, 2] - cp[ec, 0]])
                lam = np.linalg.solve(B, x - cp[ec, 0])
                bary = np.array([1 - lam.sum(), *lam])
            if bary.min() < -1e-10:
                raise InvalidArgument("fine element not contained in its parent")
            for a, val in zip(coarse.elements[ec], bary):
                if abs(val) > 1e-14:
                    P[v, a] = val
            seen[v] = True
    return P.tocsr()


class TrilinearForm:
    """Sparse 3-tensor G[i, r, s] = int phi_i^q grad phi_r^u . grad phi_s^u dx.

    Stored as a matrix ``W`` (nnz x M_q) over the sparsity pattern (rows, cols)
    of the fine stiffness matrix, so that ``W @ q`` is the CSR data array of
    the q-weighted stiffness matrix.
    """

    def __init__(self, W, rows, cols, n_u, n_q):
        self.W = sp.csr_matrix(W)
        self.WT = self.W.T.tocsr()
        self.rows = np.asarray(rows)
        self.cols = np.asarray(cols)
        self.n_u = n_u
        self.n_q = n_q
        self.nnz = len(rows)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(self.rows, minlength=n_u))])
        # row-summation operator over the pattern
        self._rsum = sp.csr_matrix((np.ones(self.nnz), np.arange(self.nnz), self.indptr),
                                   shape=(n_u, self.nnz))

    def matrix(self, q) -> sp.csr_matrix:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_q,):
            raise InvalidArgument(f"coefficient vector must have length {self.n_q}")
        return sp.csr_matrix((self.W @ q, self.cols.copy(), self.indptr.copy()),
                             shape=(self.n_u, self.n_u))

    def apply_batch(self, Q, U) -> np.ndarray:
        """Column j: K(Q[:, j]) @ U[:, j]."""
        data = self.W @ Q
        return self._rsum @ (data * U[self.cols])

    def field_matrix(self, u) -> np.ndarray:
        """Dense M_u x M_q matrix whose column i is G[i] u."""
        return (self._rsum @ sp.diags(np.asarray(u)[self.cols]) @ self.W).toarray()

    def row_sum(self, values) -> np.ndarray:
        """Sum pattern-indexed rows (nnz x k) into the u-space (M_u x k)."""
        return self._rsum @ values

    def contract_out(self, A, B) -> np.ndarray:
        """Column j, entry i: A[:, j]^T G[i] B[:, j]."""
        return self.WT @ (A[self.rows] * B[self.cols])

    def to_dense(self) -> np.ndarray:
        G = np.zeros((self.n_q, self.n_u, self.n_u))
        Wd = self.W.toarray()
        G[:, self.rows, self.cols] = Wd.T
        return G


def assemble_trilinear(space_q: FeSpace, space_u: FeSpace) -> TrilinearForm:
    coarse, fine = space_q.mesh, space_u.mesh
    if coarse.dim != fine.dim:
        raise InvalidArgument("meshes have different dimensions")
    P = prolongation(coarse, fine)
    d = fine.dim
    ne = fine.n_elements
    # exact mean of a linear function over a simplex = mean of its vertex values
    avg = sp.csr_matrix((np.full(ne * (d + 1), 1.0 / (d + 1)),
                         (np.repeat(np.arange(ne), d + 1), fine.elements.ravel())),
                        shape=(ne, fine.n_vertices))
    elem_weight = (avg @ P).tocsr()  # (ne, M_q)
    kloc = local_stiffness(fine)
    el = fine.elements
    rows = np.repeat(el, d + 1, axis=1).ravel()
    cols = np.tile(el, (1, d + 1)).ravel()
    elem_of = np.repeat(np.arange(ne), (d + 1) ** 2)
    Wcoo = sp.diags(kloc.ravel()) @ elem_weight[elem_of]
    n = fine.n_vertices
    keys = rows * n + cols
    uniq, inv = np.unique(keys, return_inverse=True)
    summ = sp.csr_matrix((np.ones(len(keys)), (inv, np.arange(len(keys)))), shape=(len(uniq), len(keys)))
    W = (summ @ Wcoo).tocsr()
    W.eliminate_zeros()
    return TrilinearForm(W, uniq // n, uniq % n, n, coarse.n_vertices)


@dataclass(eq=False)
class SpatialOperators:
    space_q: FeSpace
    space_u: FeSpace
    mass_q: sp.csr_matrix
    stiff_q: sp.csr_matrix
    mass_u: sp.csr_matrix
    stiff_u: sp.csr_matrix
    stiff_u_bc: sp.csr_matrix
    trilinear: TrilinearForm


def build_spatial_operators(space_q: FeSpace, space_u: FeSpace) -> SpatialOperators:
    return SpatialOperators(
        space_q=space_q,
        space_u=space_u,
        mass_q=assemble_mass(space_q),
        stiff_q=assemble_stiffness(space_q, apply_bc=False),
        mass_u=assemble_mass(space_u),
        stiff_u=assemble_stiffness(space_u, apply_bc=False),
        stiff_u_bc=assemble_stiffness(space_u, apply_bc=True),
        trilinear=assemble_trilinear(space_q, space_u),
    )
