import numpy as np
import pytest

from gpbd import energies as en
from gpbd.engine import ParticleSystem, Simulation, SolverConfig, predict
from gpbd.mesh import TetMesh, generate_grid_cloth
from gpbd.reference import (
    OracleError,
    XpbdState,
    backward_euler_step,
    be_residual,
    internal_gradient,
    internal_hessian,
    newton_backward_euler,
    xpbd_iterate,
    xpbd_project,
    xpbd_step,
)

G = np.array([0.0, 0.0, -9.81])
TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])


def test_xpbd_example():
    term = en.distance_terms([[0, 1]], [1.0], 0.0)[0]
    x = np.array([[0, 0, 0], [2.0, 0, 0]])
    lam = xpbd_project(term, x, np.ones(2), [0.0], 0.01)
    assert lam[0] == pytest.approx(-0.5)
    assert np.allclose(x, [[0.5, 0, 0], [1.5, 0, 0]])


def test_xpbd_satisfied_constraint_no_motion():
    term = en.distance_terms([[0, 1]], [2.0], 0.0)[0]
    x = np.array([[0, 0, 0], [2.0, 0, 0]])
    lam = xpbd_project(term, x, np.ones(2), [0.0], 0.01)
    assert lam[0] == 0.0
    assert np.array_equal(x, [[0, 0, 0], [2.0, 0, 0]])


def test_xpbd_pinned_endpoint():
    term = en.distance_terms([[0, 1]], [1.0], 0.0)[0]
    x = np.array([[0, 0, 0], [0, 3.0, 0]])
    xpbd_project(term, x, np.array([0.0, 1.0]), [0.0], 0.01)
    assert np.array_equal(x[0], [0, 0, 0])
    assert np.allclose(x[1], [0, 1, 0])


def test_xpbd_pin_term_rows():
    term = en.pin_terms([0], [[1.0, 2.0, 3.0]], 0.0)[0]
    x = np.zeros((1, 3))
    xpbd_project(term, x, np.ones(1), np.zeros(3), 0.01)
    assert np.allclose(x[0], [1.0, 2.0, 3.0])


def test_xpbd_rejects_elastic_terms():
    term = en.tet_terms(TetMesh(TET, [[0, 1, 2, 3]]), en.NeoHookeanParams(1.0, 1.0))[0]
    with pytest.raises(TypeError):
        xpbd_project(term, TET.copy(), np.ones(4), np.zeros(6), 0.01)


def test_no_internal_forces():
    xt = np.random.default_rng(0).normal(size=(3, 3))
    res = newton_backward_euler(en.TermSet.empty(), xt, np.ones(3), np.ones(3), 0.01)
    assert res.converged and res.iterations == 0
    assert np.array_equal(res.x, xt)


def test_single_spring_matches_xpbd_fixed_point():
    terms = en.distance_terms([[0, 1]], [1.0], 1e-3)
    dt = 1e-3
    ps = ParticleSystem.create(np.array([[0, 0, 0], [1.3, 0.2, 0.0]]), [1.0, 2.0])
    predict(ps, None, dt)
    res = newton_backward_euler(terms, ps.x_tilde, ps.mass, ps.inv_mass, dt, tol=1e-12)
    state = XpbdState.zeros(1)
    for _ in range(200):
        xpbd_iterate(ps, terms, state, dt)
    assert np.abs(ps.x - res.x).max() <= 1e-8


def test_hard_constraint_rejected():
    terms = en.distance_terms([[0, 1]], [1.0], 0.0)
    with pytest.raises(OracleError):
        newton_backward_euler(terms, np.eye(2, 3), np.ones(2), np.ones(2), 0.01)


def snh_tet_sim(iterations):
    m = TetMesh(TET, [[0, 1, 2, 3]])
    terms = en.tet_terms(m, en.NeoHookeanParams.from_young(1e3, 0.3, "stable"))
    ps = ParticleSystem.create(TET, 1.0, pinned=[0, 1, 2])
    return Simulation(ps, terms, SolverConfig(dt=0.01, iterations=iterations, newton_iterations=1), gravity=G)


def test_snh_tet_oracle_and_gpbd_gap():
    ref = snh_tet_sim(1)
    ps = ref.ps.copy()
    predict(ps, ps.mass[:, None] * G, 0.01)
    res = newton_backward_euler(ref.terms, ps.x_tilde, ps.mass, ps.inv_mass, 0.01, tol=1e-10)
    assert res.converged
    assert be_residual(ref.terms, res.x, ps.x_tilde, ps.mass, ps.inv_mass, 0.01) <= 1e-10
    # GPBD approaches the oracle as the iteration count grows
    gaps = []
    for it in (1, 2, 50):
        sim = snh_tet_sim(it)
        sim.step()
        gaps.append(np.abs(sim.ps.x - res.x).max())
    assert gaps[2] <= gaps[1] < gaps[0]
    assert gaps[2] <= 1e-8


def test_backward_euler_step_updates_velocity():
    terms = en.distance_terms([[0, 1]], [1.0], 1e-4)
    ps = ParticleSystem.create(np.array([[0, 0, 0], [1.0, 0, 0]]), 1.0, pinned=[0])
    x0 = ps.x.copy()
    backward_euler_step(ps, terms, 0.01, G, tol=1e-12)
    assert np.array_equal(ps.x[0], x0[0])
    assert np.allclose(ps.v, (ps.x - x0) / 0.01)
    assert ps.x[1, 2] < 0


def test_spring_hessian_matches_fd():
    terms = en.distance_terms([[0, 1], [1, 2]], [1.0, 0.8], 1e-2)
    x = np.random.default_rng(1).normal(size=(3, 3))
    H = internal_hessian(terms, x)
    h = 1e-6
    fd = np.zeros_like(H)
    for c in range(9):
        e = np.zeros(9)
        e[c] = h
        fd[:, c] = ((internal_gradient(terms, x + e.reshape(3, 3)) - internal_gradient(terms, x - e.reshape(3, 3))) / (2 * h)).ravel()
    assert np.allclose(H, fd, rtol=1e-5, atol=1e-4)


def test_gpbd_and_xpbd_share_fixed_point():
    m = generate_grid_cloth(5, 5, 0.25)
    terms = en.spring_terms(m.vertices, m.edges, 1e-4)
    dt = 0.005
    a = ParticleSystem.create(m.vertices, 0.05, pinned=[0, 4])
    b = a.copy()
    Simulation(a, terms, SolverConfig(dt=dt, iterations=500), gravity=G).step()
    xpbd_step(b, terms, dt, 500, gravity=G)
    ref = b.copy()
    ref.x = b.x_prev.copy()
    ref.v = np.zeros_like(ref.x)
    predict(ref, ref.mass[:, None] * G, dt)
    res = newton_backward_euler(terms, ref.x_tilde, ref.mass, ref.inv_mass, dt, tol=1e-12)
    assert np.abs(a.x - b.x).max() < 1e-6
    assert np.abs(a.x - res.x).max() < 1e-6
