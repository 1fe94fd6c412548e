import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochid.errors import InvalidArgument, Unsupported
from stochid.fem import FeSpace, assemble_trilinear, build_interval_mesh, refine_uniform
from stochid.sparse_grid import basis_matrix, build_sparse_grid
from stochid.stochastic import (DensityModel, apply_kron, assemble_coupled_form,
                                assemble_stochastic_operators, kron_inner)


def _simpson_rule(level, n):
    """Tensor composite Simpson rule on the finest dyadic cells (exact for piecewise cubics)."""
    ncell = 2 ** max(level - 1, 0)
    x = np.linspace(0, 1, 2 * ncell + 1)
    w = np.ones_like(x)
    w[1:-1:2], w[2:-1:2] = 4, 2
    w /= 6 * ncell
    pts = np.array(list(itertools.product(x, repeat=n)))
    wts = np.prod(np.array(list(itertools.product(w, repeat=n))), axis=1)
    return pts, wts


@pytest.mark.parametrize("n,L", [(1, 2), (1, 4), (2, 3)])
def test_uniform_forms_match_simpson(n, L):
    grid = build_sparse_grid(n, L)
    ops = assemble_stochastic_operators(grid, DensityModel.uniform(n))
    pts, w = _simpson_rule(L, n)
    B = basis_matrix(grid, pts)
    np.testing.assert_allclose(ops.S_rho, (B * w[:, None]).T @ B, atol=1e-14)
    np.testing.assert_allclose(ops.mean, w @ B, atol=1e-14)
    np.testing.assert_allclose(ops.T_rho, np.einsum("sa,sb,sc,s->abc", B, B, B, w), atol=1e-14)
    # mixed form: product over dims of (value*value + derivative*derivative); the
    # derivative is discontinuous at nodes, so integrate at interior Gauss points instead
    g, gw = np.polynomial.legendre.leggauss(3)
    ncell = 2 ** (L - 1)
    x = ((np.arange(ncell)[:, None] + (g + 1) / 2) / ncell).ravel()
    xw = np.tile(gw / (2 * ncell), ncell)
    qp = np.array(list(itertools.product(x, repeat=n)))
    qw = np.prod(np.array(list(itertools.product(xw, repeat=n))), axis=1)
    mix = np.ones((len(qp), grid.n_nodes, grid.n_nodes))
    for t in range(n):
        v = basis_matrix(grid, qp)  # value factors per dim
        vt = np.ones_like(v)
        dt = np.ones_like(v)
        for k in range(grid.n_nodes):
            from stochid.sparse_grid import hat_1d, hat_1d_derivative
            vt[:, k] = hat_1d(grid.levels[k, t], grid.indices[k, t], qp[:, t])
            dt[:, k] = hat_1d_derivative(grid.levels[k, t], grid.indices[k, t], qp[:, t])
        mix *= vt[:, :, None] * vt[:, None, :] + dt[:, :, None] * dt[:, None, :]
    np.testing.assert_allclose(ops.S_mix, np.einsum("s,sab->ab", qw, mix), atol=1e-12)


def test_known_1d_values():
    grid = build_sparse_grid(1, 2)  # nodes 0.5, 0, 1
    ops = assemble_stochastic_operators(grid, DensityModel.uniform(1))
    assert ops.S_rho[1, 1] == pytest.approx(1 / 6)
    assert ops.S_mix[1, 1] - ops.S_rho[1, 1] == pytest.approx(2.0)
    assert ops.S_rho[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(ops.mean, [1.0, 0.25, 0.25])


def test_level_one_slice_of_T_is_S():
    grid = build_sparse_grid(3, 3)
    ops = assemble_stochastic_operators(grid, DensityModel.uniform(3))
    np.testing.assert_allclose(ops.T_rho[0], ops.S_rho, atol=1e-15)


def test_empirical_forms_are_sample_averages():
    grid = build_sparse_grid(2, 3)
    rng = np.random.default_rng(4)
    Y = rng.random((500, 2))
    ops = assemble_stochastic_operators(grid, DensityModel.empirical(Y))
    B = basis_matrix(grid, Y)
    np.testing.assert_allclose(ops.S_rho, B.T @ B / 500, atol=1e-14)
    np.testing.assert_allclose(ops.mean, B.mean(axis=0), atol=1e-14)
    # many uniform samples approach the exact uniform forms
    big = assemble_stochastic_operators(grid, DensityModel.empirical(rng.random((40000, 2))))
    ref = assemble_stochastic_operators(grid, DensityModel.uniform(2))
    assert np.abs(big.S_rho - ref.S_rho).max() < 0.01
    assert np.abs(big.S_mix - ref.S_mix).max() < 0.3


def test_apply_kron_and_inner_against_dense():
    rng = np.random.default_rng(5)
    S, A = rng.standard_normal((4, 4)), rng.standard_normal((3, 3))
    V, W = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    v = V.T.ravel()  # node-by-node stacking
    np.testing.assert_allclose(apply_kron(S, A, v), np.kron(S, A) @ v, atol=1e-13)
    Ss = S + S.T
    assert kron_inner(V, W, Ss, A) == pytest.approx(V.T.ravel() @ np.kron(Ss, A) @ W.T.ravel())
    # rank-one identity
    s, a = rng.standard_normal(4), rng.standard_normal(3)
    np.testing.assert_allclose(apply_kron(S, A, np.kron(s, a)), np.kron(S @ s, A @ a), atol=1e-13)
    with pytest.raises(InvalidArgument):
        apply_kron(S, A, np.ones(5))


def test_coupled_forms_against_brute_force():
    rng = np.random.default_rng(6)
    mq = build_interval_mesh(2)
    tri = assemble_trilinear(FeSpace(mq), FeSpace(refine_uniform(mq)))
    G = tri.to_dense()
    grid = build_sparse_grid(2, 2)
    ops = assemble_stochastic_operators(grid, DensityModel.uniform(2))
    T = ops.T_rho
    N = grid.n_nodes
    Q = rng.random((tri.n_q, N))
    U, V = rng.standard_normal((tri.n_u, N)), rng.standard_normal((tri.n_u, N))
    ref_q = np.einsum("jab,ia,irs,sb->rj", T, Q, G, V)
    np.testing.assert_allclose(assemble_coupled_form(ops, tri, Q, "q").apply(V), ref_q, atol=1e-12)
    ref_u = np.einsum("jab,ra,irs,sb->ij", T, U, G, V)
    np.testing.assert_allclose(assemble_coupled_form(ops, tri, U, "u").apply(V), ref_u, atol=1e-12)
    with pytest.raises(InvalidArgument):
        assemble_coupled_form(ops, tri, Q, "x")
    with pytest.raises(InvalidArgument):
        assemble_coupled_form(ops, tri, U, "q")


def test_density_validation():
    with pytest.raises(InvalidArgument):
        DensityModel.uniform(2, 1.0, 0.0)
    with pytest.raises(InvalidArgument):
        DensityModel.empirical(np.array([[0.2, 1.5]]))
    with pytest.raises(InvalidArgument):
        assemble_stochastic_operators(build_sparse_grid(2, 2), DensityModel.uniform(3))
    with pytest.raises(Unsupported):
        assemble_stochastic_operators(build_sparse_grid(1, 2), DensityModel.uniform(1), s=2)
    rho = DensityModel.uniform(2, -1.0, 1.0)
    np.testing.assert_allclose(rho.to_physical([[0.5, 1.0]]), [[0.0, 1.0]])


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 3), L=st.integers(1, 4))
def test_form_properties(n, L):
    grid = build_sparse_grid(n, L)
    ops = assemble_stochastic_operators(grid, DensityModel.uniform(n))
    assert np.linalg.eigvalsh(ops.S_rho).min() > 0
    assert np.linalg.eigvalsh(ops.S_mix - ops.S_rho).min() > -1e-12
    T = ops.T_rho
    np.testing.assert_allclose(T, T.transpose(1, 0, 2), atol=1e-15)
    np.testing.assert_allclose(T, T.transpose(2, 1, 0), atol=1e-15)
    # the constant function 1 has surplus e_0
    np.testing.assert_allclose(ops.S_rho[0], ops.mean, atol=1e-15)
