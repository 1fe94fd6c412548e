import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochid.errors import InvalidArgument
from stochid.fem import FeSpace, build_interval_mesh
from stochid.sparse_grid import (SurplusField, basis_matrix, build_sparse_grid, dehierarchize,
                                 eval_basis, hat_1d, hat_1d_derivative, hierarchize, interpolate)


def _nodes_1d(level):
    if level == 1:
        return {0.5}
    if level == 2:
        return {0.0, 1.0}
    return {k / 2 ** (level - 1) for k in range(1, 2 ** (level - 1), 2)}


def _enumerate(n, L):
    """Node set as the union of tensor blocks with |l|_1 <= L + n - 1."""
    pts = set()
    for l in itertools.product(range(1, L + 1), repeat=n):
        if sum(l) <= L + n - 1:
            pts.update(itertools.product(*(_nodes_1d(t) for t in l)))
    return pts


@pytest.mark.parametrize("n,L,count", [(1, 3, 5), (4, 3, 41), (3, 4, 69), (2, 4, 29), (2, 2, 5), (2, 3, 13)])
def test_node_sets_match_enumeration(n, L, count):
    grid = build_sparse_grid(n, L)
    got = {tuple(c) for c in grid.coords.tolist()}
    assert got == _enumerate(n, L)
    assert grid.n_nodes == count == len(got)


def test_node_order_by_total_level():
    grid = build_sparse_grid(3, 3)
    tot = grid.levels.sum(axis=1)
    assert np.all(np.diff(tot) >= 0)
    np.testing.assert_array_equal(grid.coords[0], [0.5, 0.5, 0.5])


def test_hierarchize_matches_dense_collocation_solve():
    grid = build_sparse_grid(3, 3)
    P = basis_matrix(grid, grid.coords)
    rng = np.random.default_rng(0)
    V = rng.standard_normal((4, grid.n_nodes))
    np.testing.assert_allclose(hierarchize(grid, V), np.linalg.solve(P, V.T).T, atol=1e-12)
    np.testing.assert_allclose(grid.hierarchization_matrix @ P, np.eye(grid.n_nodes), atol=1e-14)


def test_basis_is_interpolatory_on_own_level():
    grid = build_sparse_grid(2, 3)
    P = grid.evaluation_matrix
    np.testing.assert_allclose(np.diag(P), 1.0)


def test_hat_values_and_derivative():
    assert hat_1d(2, 0, np.array([0.0, 0.5, 1.0])).tolist() == [1.0, 0.0, 0.0]
    assert hat_1d(3, 1, np.array([0.25, 0.5])).tolist() == [1.0, 0.0]
    y = np.array([0.1, 0.3, 0.9])
    h = 1e-7
    for l, j in ((2, 0), (2, 2), (3, 1), (4, 5)):
        fd = (hat_1d(l, j, y + h) - hat_1d(l, j, y - h)) / (2 * h)
        np.testing.assert_allclose(hat_1d_derivative(l, j, y), fd, atol=1e-5)
    assert hat_1d_derivative(2, 2, np.array([1.0]))[0] == pytest.approx(2.0)


# the product of all n coordinates needs the all-level-2 block, hence L >= n + 1
@pytest.mark.parametrize("n,L", [(1, 2), (2, 3), (3, 4), (4, 5)])
def test_multilinear_functions_are_exact(n, L):
    grid = build_sparse_grid(n, L)
    rng = np.random.default_rng(3)
    coef = rng.standard_normal(2 ** n)

    def f(Y):
        out = np.zeros(len(Y))
        for k, mask in enumerate(itertools.product((0, 1), repeat=n)):
            out += coef[k] * np.prod(np.where(np.array(mask, bool), Y, 1.0), axis=1)
        return out

    Z = hierarchize(grid, f(grid.coords))
    Y = rng.random((20, n))
    np.testing.assert_allclose(Z @ basis_matrix(grid, Y).T, f(Y)[None], atol=1e-12)


def test_eval_basis_sparse_and_interpolate():
    grid = build_sparse_grid(2, 3)
    space = FeSpace(build_interval_mesh(2))
    X = space.mesh.vertices[:, 0]
    nodal = np.array([[x + y1 * y2 for y1, y2 in grid.coords] for x in X])
    field = SurplusField(space, grid, hierarchize(grid, nodal))
    np.testing.assert_allclose(field.nodal(), nodal, atol=1e-14)
    assert interpolate(field, [0.25], [0.3, 0.6]) == pytest.approx(0.25 + 0.18)
    idx, vals = eval_basis(grid, [0.3, 0.6])
    assert len(idx) < grid.n_nodes and np.all(vals != 0)


def test_input_validation():
    grid = build_sparse_grid(2, 2)
    with pytest.raises(InvalidArgument):
        basis_matrix(grid, [[1.2, 0.3]])
    with pytest.raises(InvalidArgument):
        hierarchize(grid, np.zeros((3, 4)))
    with pytest.raises(InvalidArgument):
        build_sparse_grid(0, 2)
    assert json.loads(grid.to_json())["levels"][0] == [1, 1]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), L=st.integers(1, 4), seed=st.integers(0, 2 ** 16))
def test_roundtrip_property(n, L, seed):
    grid = build_sparse_grid(n, L)
    V = np.random.default_rng(seed).standard_normal((2, grid.n_nodes))
    assert np.abs(dehierarchize(grid, hierarchize(grid, V)) - V).max() <= 1e-12
    # partition of unity holds on every grid since the level-1 function is constant
    Y = np.random.default_rng(seed + 1).random((5, n))
    ones = hierarchize(grid, np.ones((1, grid.n_nodes)))
    np.testing.assert_allclose(ones @ basis_matrix(grid, Y).T, 1.0, atol=1e-13)
