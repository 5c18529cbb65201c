import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from p2inn import pdes, truth
from p2inn.errors import ConfigurationError, SolverStateError


def test_pure_convection_matches_translation():
    beta = 3.0
    g = truth.solve_cdr(pdes.make_instance("convection", [beta], "one_plus_sin"))
    exact = 1.0 + np.sin(g.x[None, :] - beta * g.t[:, None])
    assert np.abs(g.values - exact).max() < 1e-10


def test_pure_reaction_matches_logistic():
    rho = 5.0
    g = truth.solve_cdr(pdes.make_instance("reaction", [rho], "gauss_pi_2"))
    u0 = pdes.eval_ic("gauss_pi_2", g.x)[None, :]
    e = np.exp(rho * g.t)[:, None]
    assert np.abs(g.values - u0 * e / (u0 * e + 1 - u0)).max() < 1e-12


def test_pure_diffusion_single_mode_decay():
    nu = 2.0
    g = truth.solve_cdr(pdes.make_instance("diffusion", [nu], "one_plus_sin"))
    exact = 1.0 + np.exp(-nu * g.t[:, None]) * np.sin(g.x[None, :])
    assert np.abs(g.values - exact).max() < 1e-12


def test_strang_self_convergence_second_order():
    inst = pdes.PdeInstance("cdr", (1.0, 1.0, 1.0), "gauss_pi_2")
    u1, u2, u4 = (truth.solve_cdr(inst, nt=n).values[-1] for n in (25, 50, 100))
    ratio = np.linalg.norm(u1 - u2) / np.linalg.norm(u2 - u4)
    assert 3.0 <= ratio <= 5.0


def test_solver_grid_layout():
    g = truth.solve_cdr(pdes.make_instance("reaction", [1], "gauss_pi_4"), nx=64, nt=10)
    assert g.values.shape == (11, 64)
    np.testing.assert_array_equal(g.values[0], pdes.eval_ic("gauss_pi_4", g.x))
    with pytest.raises(ConfigurationError):
        truth.solve_cdr(pdes.make_instance("reaction", [1]), nx=100)


def test_reaction_step_domain():
    with pytest.raises(SolverStateError):
        truth.reaction_step(np.array([-0.1]), 1.0, 0.1)
    with pytest.raises(SolverStateError):
        truth.reaction_step(np.array([np.nan]), 1.0, 0.1)
    np.testing.assert_array_equal(truth.reaction_step(np.array([0.3]), 2.0, 0.0), [0.3])
    assert truth.reaction_step(np.array([-1e-12]), 1.0, 0.1)[0] == 0.0


@given(st.floats(0, 2), st.floats(0, 10), st.floats(0, 0.5), st.floats(0, 0.5))
def test_reaction_flow_semigroup(u, rho, t1, t2):
    a = truth.reaction_step(truth.reaction_step(np.array([u]), rho, t1), rho, t2)
    b = truth.reaction_step(np.array([u]), rho, t1 + t2)
    assert a[0] == pytest.approx(b[0], rel=1e-12, abs=1e-12)


def test_interpolation_exact_at_nodes_and_periodic():
    g = truth.solve_cdr(pdes.make_instance("convection", [1], "one_plus_sin"), nx=32, nt=8)
    X, T = np.meshgrid(g.x, g.t)
    np.testing.assert_allclose(g.interpolate(np.c_[X.ravel(), T.ravel()]), g.values.ravel(), atol=1e-14)
    np.testing.assert_allclose(g.interpolate([[2 * np.pi, 0.5]]), g.interpolate([[0.0, 0.5]]), atol=1e-14)


def test_dataset_sizes_and_determinism():
    inst = pdes.make_instance("reaction", [2])
    a, b = truth.sample_dataset(inst, seed=3), truth.sample_dataset(inst, seed=3)
    assert a.sizes == (1000, 256, 100, 1000)
    np.testing.assert_array_equal(a.collocation, b.collocation)
    assert not np.array_equal(a.collocation, truth.sample_dataset(inst, seed=4).collocation)
    assert np.all(a.initial[:, 1] == 0)
    np.testing.assert_array_equal(a.boundary[:, 1], a.boundary_pair[:, 1])
    assert np.all(a.boundary[:, 0] == 0) and np.all(a.boundary_pair[:, 0] == 2 * np.pi)


def test_helmholtz_dataset():
    ds = truth.sample_dataset(pdes.make_instance("helmholtz", [2.75]), seed=0)
    assert ds.sizes == (1000, 400, 100)
    on_edge = np.isclose(np.abs(ds.boundary), 1.0).any(axis=1)
    assert on_edge.all()
    np.testing.assert_allclose(ds.boundary_values, truth.helmholtz_exact(2.75, ds.boundary))
    assert len(ds.initial) == 0


@pytest.mark.parametrize("args", [("reaction", [3]), ("helmholtz", [2.6])])
def test_dataset_export_roundtrip(tmp_path, args):
    ds = truth.sample_dataset(pdes.make_instance(*args), seed=1, sizes=None)
    p = tmp_path / "d.txt"
    truth.export_dataset(ds, p)
    back = truth.load_dataset(p)
    assert back.instance == ds.instance
    for f in ("collocation", "initial", "initial_values", "boundary", "boundary_pair", "boundary_values", "test",
              "test_values"):
        np.testing.assert_array_equal(np.asarray(getattr(back, f)).reshape(-1), np.asarray(getattr(ds, f)).reshape(-1))


def test_exact_solution_helmholtz_values():
    assert truth.helmholtz_exact(2.5, [[0.2, 0.2]])[0] == pytest.approx(math.sin(0.5 * math.pi) ** 2)
