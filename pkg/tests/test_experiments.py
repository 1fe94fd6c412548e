import csv
import json
from dataclasses import replace

import numpy as np
import pytest
import sympy

from stochid import kl
from stochid.errors import InvalidArgument
from stochid.experiments import (ExampleSpec, build_problem, build_setup, central_moments,
                                 exact_moments, exact_q_surplus, forward_paths, make_example,
                                 moment_fields, plateau, plateau_d1, plateau_d2, run_config_for,
                                 run_example, synthesize_data)
from stochid.sparse_grid import SurplusField, build_sparse_grid, hierarchize
from stochid.stochastic import DensityModel

x1, x2 = sympy.symbols("x1 x2")


def _sym_forcing(k, w):
    return -(sympy.diff(k * sympy.diff(w, x1), x1) + sympy.diff(k * sympy.diff(w, x2), x2))


def _check_forcing(spec, expr, pts):
    fn = sympy.lambdify((x1, x2), expr, "numpy")
    np.testing.assert_allclose(spec.forcing(pts), fn(pts[:, 0], pts[:, 1]), rtol=1e-12, atol=1e-10)


def test_example_constants():
    e1, e2, e3 = (make_example(i) for i in (1, 2, 3))
    assert (e1.n, e1.q_mesh_size, e1.beta, e1.delta, e1.spatial_dim) == (4, 30, 5e-5, 1e-3, 1)
    assert (e2.n, e2.beta_variants, e2.q_mesh_size) == (3, (1e-5, 1e-3), 14)
    assert 2 * e2.q_mesh_size ** 2 == 392
    assert (e3.n_samples, e3.kl_tol, e3.level, e3.beta, e3.delta) == (1000, 1e-7, 4, 1e-5, 0.0)
    with pytest.raises(InvalidArgument):
        make_example(4)
    assert json.dumps(e2.describe())


def test_plateau_is_c1_with_flat_middle():
    for a in (1 / 3, 2 / 3):
        assert plateau(a - 1e-12) == pytest.approx(plateau(a + 1e-12), abs=1e-9)
        assert plateau_d1(a - 1e-12) == pytest.approx(plateau_d1(a + 1e-12), abs=1e-9)
    assert plateau(0.0) == 0.0 and plateau(1.0) == pytest.approx(0.0)
    assert plateau(0.5) == 1.0 and plateau_d1(0.5) == 0.0
    x = np.array([0.1, 0.2, 0.8, 0.9])
    h = 1e-6
    np.testing.assert_allclose(plateau_d1(x), (plateau(x + h) - plateau(x - h)) / (2 * h), atol=1e-6)
    np.testing.assert_allclose(plateau_d2(x), (plateau_d1(x + h) - plateau_d1(x - h)) / (2 * h), atol=1e-4)


def test_forcings_match_symbolic_divergence():
    rng = np.random.default_rng(0)
    pts = rng.random((40, 2))
    e3 = make_example(3)
    _check_forcing(e3, _sym_forcing(4 + x1 * x2, sympy.sin(sympy.pi * x1) * sympy.sin(sympy.pi * x2)), pts)
    # plateau pieces: test inside each smooth region of the product
    e2 = make_example(2)
    k = 2 + sympy.sin(x1 ** 2 * x2)
    left, right = -9 * x1 ** 2 + 6 * x1, -9 * x1 ** 2 + 12 * x1 - 3
    pieces = {0: left, 1: sympy.Integer(1), 2: right}
    for a in range(3):
        for b in range(3):
            wa = pieces[a]
            wb = pieces[b].subs(x1, x2)
            sub = (pts + np.array([a, b])) / 3
            _check_forcing(e2, _sym_forcing(k, wa * wb), sub)


def test_example1_forcing_is_polynomial():
    e1 = make_example(1)
    x = np.linspace(0, 1, 7)[:, None]
    np.testing.assert_allclose(e1.forcing(x), 6 * x[:, 0] ** 2 - 2 * x[:, 0] + 4)


def _small_ex1():
    return replace(make_example(1), q_mesh_size=6, level=2)


def test_synthesis_without_noise_is_exact_forward_solve():
    spec = replace(_small_ex1(), delta=0.0)
    setup = build_setup(spec)
    problem = build_problem(setup, spec.n, spec.level, DensityModel.uniform(spec.n))
    U = synthesize_data(spec, 0, setup, problem)
    Qn = spec.exact_q(setup.space_q.mesh.vertices, problem.density.to_physical(problem.grid.coords))
    np.testing.assert_allclose(problem.nodal(U), forward_paths(setup, Qn), atol=1e-13)
    noisy = problem.nodal(synthesize_data(replace(spec, delta=1e-3), 0, setup, problem))
    clean = problem.nodal(U)
    inner = np.abs(clean) > 0
    assert np.abs(noisy[inner] / clean[inner] - 1).max() <= 1e-3 + 1e-12


def test_example3_data_has_three_dominant_modes():
    spec = replace(make_example(3), n_samples=300)
    setup = build_setup(spec)
    data = synthesize_data(spec, 1, setup)
    _, sigma = kl.sample_stats(data)
    nu, _ = kl.kl_decompose(sigma, setup.spatial.stiff_u_bc)
    assert nu[2] / nu[0] > 1e-2
    assert nu[3] / nu[0] < 1e-3


def test_moments_of_deterministic_field_and_example1_mean():
    grid = build_sparse_grid(2, 3)
    from stochid.fem import FeSpace, build_interval_mesh
    space = FeSpace(build_interval_mesh(3))
    const = np.zeros((space.n_dofs, grid.n_nodes))
    const[:, 0] = np.arange(space.n_dofs)
    field = SurplusField(space, grid, const)
    rho = DensityModel.uniform(2)
    np.testing.assert_allclose(central_moments(field, 2, rho, 1000, 0), 0.0, atol=1e-20)
    np.testing.assert_allclose(central_moments(field, 1, rho, 1000, 0), np.arange(space.n_dofs))
    with pytest.raises(InvalidArgument):
        central_moments(field, 5, rho, 10, 0)


def test_moment_fields_independent_of_chunking():
    spec = make_example(1)
    X = np.linspace(0, 1, 5)[:, None]

    def ev(rng, m):
        return spec.exact_q(X, rng.random((m, 4)))

    a = moment_fields(ev, 5000, 3, chunk=1000)
    b = moment_fields(ev, 5000, 3, chunk=1000)
    np.testing.assert_array_equal(a[2], b[2])
    assert np.all(a[2] >= 0) and np.all(a[4] >= 0)


def test_run_example_writes_outputs(tmp_path):
    spec = _small_ex1()
    cfg = run_config_for(spec, max_outer=2, preconditioner="kron")
    res = run_example(spec, seed=7, cfg=cfg, out_dir=tmp_path, n_mc=200)
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["status"] in ("converged", "not_converged")
    assert meta["outer_iterations"] == len(res.result.history) <= 2
    rows = list(csv.DictReader(open(tmp_path / "convergence.csv")))
    assert len(rows) == len(res.result.history)
    assert rows[0]["penalty"] == "10.0"
    for k in range(1, 5):
        assert (tmp_path / f"moments_exact_k{k}.csv").exists()
        assert (tmp_path / f"moments_identified_k{k}.csv").exists()
    assert res.final_error == pytest.approx(res.result.history[-1].l2_error)
