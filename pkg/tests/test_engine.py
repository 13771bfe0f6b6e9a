import numpy as np
import pytest

from gpbd import energies as en
from gpbd.engine import (
    DisplacementLedger,
    ParticleSystem,
    Simulation,
    SimulationError,
    SolverConfig,
    predict,
    recover_all_inversions,
    sweep_gauss_seidel,
    sweep_jacobi,
)
from gpbd.mesh import Coloring, TetMesh, color_elements, generate_cube_tets, generate_grid_cloth
from gpbd.reference import be_residual
from gpbd.scenes import CONFIG_DIR, build_scene, load_scene

G = np.array([0.0, 0.0, -9.81])


def stretched_cube(variant="stable", n=2, seed=0):
    m = generate_cube_tets(n)
    terms = en.tet_terms(m, en.NeoHookeanParams.from_young(1e4, 0.3, variant))
    rng = np.random.default_rng(seed)
    x = m.vertices * [1.2, 1.0, 0.9] + rng.normal(scale=0.01, size=m.vertices.shape)
    return ParticleSystem.create(x, 1.0), terms


def setup_sweep(ps, terms, dt=0.01, f_ext=None):
    ledger = DisplacementLedger(len(terms))
    predict(ps, f_ext, dt, ledger)
    return ledger


def test_predict_examples():
    ps = ParticleSystem.create(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), 1.0, pinned=[1])
    predict(ps, None, 0.1)
    assert np.array_equal(ps.x_tilde[0], [1.0, 2.0, 3.0])
    predict(ps, np.array([G, G]), 0.1)
    assert np.allclose(ps.x_tilde[0], [1.0, 2.0, 3.0] + 0.01 * G, rtol=0, atol=1e-15)
    assert np.array_equal(ps.x_tilde[1], [0.0, 0.0, 0.0])
    assert np.array_equal(ps.x, ps.x_tilde)


def test_hard_distance_single_sweep():
    terms = en.distance_terms([[0, 1]], [1.0], 0.0)
    ps = ParticleSystem.create(np.array([[0, 0, 0], [2.0, 0, 0]]), 1.0)
    ledger = setup_sweep(ps, terms)
    cfg = SolverConfig(dt=0.01)
    sweep_gauss_seidel(ps, ledger, terms, color_elements(terms.stencils()), cfg)
    assert np.allclose(ps.x, [[0.5, 0, 0], [1.5, 0, 0]], atol=1e-12)


def test_zero_terms_no_change():
    ps = ParticleSystem.create(np.random.default_rng(0).normal(size=(5, 3)), 1.0)
    before = ps.x.copy()
    terms = en.TermSet.empty()
    ledger = DisplacementLedger(0)
    cfg = SolverConfig(dt=0.01)
    sweep_gauss_seidel(ps, ledger, terms, None, cfg)
    sweep_jacobi(ps, ledger, terms, cfg)
    assert np.array_equal(ps.x, before)


def test_disjoint_terms_order_independent():
    terms = en.distance_terms([[0, 1], [2, 3]], [1.0, 0.5], 1e-4)
    x = np.random.default_rng(1).uniform(0, 2, (4, 3))
    cfg = SolverConfig(dt=0.01)
    out = []
    for order in ([0, 1], [1, 0]):
        ps = ParticleSystem.create(x, [1.0, 2.0, 0.5, 3.0])
        ledger = setup_sweep(ps, terms)
        col = Coloring(np.array([order.index(0), order.index(1)]), [np.array([o]) for o in order])
        sweep_gauss_seidel(ps, ledger, terms, col, cfg)
        out.append(ps.x.copy())
    assert np.array_equal(out[0], out[1])


@pytest.mark.parametrize("make", [
    lambda: (en.distance_terms([[0, 1]], [0.7], 1e-3), np.array([[0, 0, 0], [1.0, 0.2, 0]])),
    lambda: (en.tet_terms(TetMesh(np.eye(4, 3)[[3, 0, 1, 2]], [[0, 1, 2, 3]]), en.NeoHookeanParams(1.0, 4.0)),
             np.eye(4, 3)[[3, 0, 1, 2]] * 1.3),
])
def test_jacobi_single_term_equals_gauss_seidel(make):
    terms, x = make()
    cfg_gs = SolverConfig(dt=0.01, newton_iterations=4)
    cfg_j = SolverConfig(dt=0.01, newton_iterations=4, mode="jacobi", omega=1.0)
    a = ParticleSystem.create(x, 0.5)
    b = ParticleSystem.create(x, 0.5)
    la, lb = setup_sweep(a, terms), setup_sweep(b, terms)
    sweep_gauss_seidel(a, la, terms, color_elements(terms.stencils()), cfg_gs)
    sweep_jacobi(b, lb, terms, cfg_j)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(la.d, lb.d)


def test_jacobi_shared_vertex_moves_by_omega_u():
    # two identical pins on vertex 0 each propose the same increment u
    terms = en.pin_terms([0, 0], [[1.0, 0, 0], [1.0, 0, 0]], 1e-3)
    single = en.pin_terms([0], [[1.0, 0, 0]], 1e-3)
    x = np.zeros((1, 3))
    one = ParticleSystem.create(x, 1.0)
    sweep_jacobi(one, setup_sweep(one, single), single, SolverConfig(dt=0.01, mode="jacobi", omega=1.0))
    u = one.x[0].copy()
    two = ParticleSystem.create(x, 1.0)
    ledger = setup_sweep(two, terms)
    sweep_jacobi(two, ledger, terms, SolverConfig(dt=0.01, mode="jacobi", omega=1.5))
    assert np.allclose(two.x[0], 1.5 * u, rtol=1e-14)
    assert ledger.residual(two, terms) <= 1e-15


def test_jacobi_over_relaxation_speeds_up_drape():
    spec, base = load_scene(CONFIG_DIR / "drape.yaml")
    # free fall is already at equilibrium; start from a state in contact with the sphere
    pre = build_scene(spec, base).sim
    for _ in range(40):
        pre.step()
    res = {}
    for omega in (1.0, 1.5):
        sim = build_scene(spec, base, mode="jacobi", omega=omega).sim
        sim.ps = ps = pre.ps.copy()
        predict(ps, sim.forces(), sim.cfg.h, sim.ledger)
        sim.project(sim.cfg.h)
        r0 = be_residual(sim.terms, ps.x, ps.x_tilde, ps.mass, ps.inv_mass, sim.cfg.h)
        for _ in range(10):
            sim.sweep()
            sim.project(sim.cfg.h)
        res[omega] = be_residual(sim.terms, ps.x, ps.x_tilde, ps.mass, ps.inv_mass, sim.cfg.h) / r0
    assert res[1.5] < res[1.0] < 1.0


def test_free_fall_closed_form():
    x0 = np.array([[0.0, 0.0, 10.0], [1.0, 2.0, 3.0]])
    v0 = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 2.0]])
    ps = ParticleSystem.create(x0, 2.0, v=v0)
    sim = Simulation(ps, en.TermSet.empty(), SolverConfig(dt=0.01), gravity=G)
    for _ in range(100):
        sim.step()
    # symplectic Euler: v_n = v0 + n dt g, x_n = x0 + n dt v0 + dt^2 g n(n+1)/2
    n, dt = 100, 0.01
    assert np.allclose(ps.x, x0 + n * dt * v0 + dt * dt * G * n * (n + 1) / 2, rtol=0, atol=1e-11)
    assert np.allclose(ps.v, v0 + n * dt * G, rtol=0, atol=1e-11)


def test_rest_cloth_stays_put():
    m = generate_grid_cloth(9, 9, 0.125)
    terms = en.cloth_terms(m, en.ClothParams(1e3, 1e-3))
    ps = ParticleSystem.create(m.vertices, 0.01)
    sim = Simulation(ps, terms, SolverConfig(dt=0.005, iterations=5))
    for _ in range(20):
        sim.step()
    assert np.abs(ps.x - m.vertices).max() <= 1e-10


@pytest.mark.parametrize("mode", ["gauss-seidel", "jacobi"])
def test_ledger_invariant_every_sweep(mode):
    ps, terms = stretched_cube()
    sim = Simulation(ps, terms, SolverConfig(dt=0.01, iterations=4, newton_iterations=3, mode=mode), gravity=G)
    worst = []
    sim.on_sweep = lambda s, rec: worst.append(rec.residual / (1 + np.abs(s.ps.x).max()))
    for _ in range(3):
        sim.step()
    assert len(worst) == 12
    assert max(worst) <= 1e-8


def momentum_drift(ps, p0):
    return np.abs(ps.momentum_moment() - p0).max() / np.abs(ps.mass[:, None] * ps.x).sum()


def test_momentum_preserved_by_gauss_seidel():
    ps, terms = stretched_cube()
    ledger = setup_sweep(ps, terms)
    cfg = SolverConfig(dt=0.01, newton_iterations=3)
    p0 = ps.momentum_moment()
    col = color_elements(terms.stencils())
    for _ in range(5):
        sweep_gauss_seidel(ps, ledger, terms, col, cfg)
    assert momentum_drift(ps, p0) <= 1e-8


def test_momentum_jacobi_uniform_degree():
    # per-vertex averaging only conserves momentum when every vertex has the same term count
    n = 12
    ang = 2 * np.pi * np.arange(n) / n
    x = np.stack([np.cos(ang), np.sin(ang), 0.1 * np.sin(3 * ang)], axis=1)
    terms = en.distance_terms([[i, (i + 1) % n] for i in range(n)], 0.3, 1e-4)
    ps = ParticleSystem.create(x, 1.0)
    ledger = setup_sweep(ps, terms)
    p0 = ps.momentum_moment()
    for _ in range(5):
        sweep_jacobi(ps, ledger, terms, SolverConfig(dt=0.01, mode="jacobi"))
    assert not np.allclose(ps.x, x)
    assert momentum_drift(ps, p0) <= 1e-8


def test_pinned_vertices_never_move():
    m = generate_grid_cloth(6, 6, 0.2)
    terms = en.cloth_terms(m, en.ClothParams(1e2, 1e-3))
    ps = ParticleSystem.create(m.vertices, 0.01, pinned=[0, 5])
    sim = Simulation(ps, terms, SolverConfig(dt=0.005, iterations=3), gravity=G)
    pinned = ps.x[[0, 5]].copy()
    sim.on_sweep = lambda s, rec: np.testing.assert_array_equal(s.ps.x[[0, 5]], pinned)
    for _ in range(10):
        sim.step()
    assert np.array_equal(ps.x[[0, 5]], pinned)
    assert not np.allclose(ps.x, m.vertices)


@pytest.mark.parametrize("mode", ["gauss-seidel", "jacobi"])
def test_bitwise_deterministic(mode):
    runs = []
    for _ in range(2):
        ps, terms = stretched_cube("log")
        sim = Simulation(ps, terms, SolverConfig(dt=0.01, iterations=3, newton_iterations=2, mode=mode), gravity=G)
        for _ in range(3):
            sim.step()
        runs.append(ps.x.tobytes())
    assert runs[0] == runs[1]


def test_substeps_and_damping():
    ps, terms = stretched_cube()
    sim = Simulation(ps, terms, SolverConfig(dt=0.01, substeps=4, iterations=2, damping=5.0))
    calls = []
    sim.on_sweep = lambda s, rec: calls.append((rec.substep, rec.sweep))
    sim.step()
    assert calls == [(s, i) for s in range(4) for i in range(2)]
    assert sim.time == pytest.approx(0.01)
    e0 = sim.energy()
    for _ in range(200):
        sim.step()
    assert sim.energy() < e0


def test_inversion_recovery_books_into_x_tilde():
    m = generate_cube_tets(1)
    terms = en.tet_terms(m, en.NeoHookeanParams(1.0, 1.0, "log"))
    ps = ParticleSystem.create(m.vertices, 1.0)
    ps.x[7, 2] = -1.5  # pull the far corner through the bottom face
    ps.x_tilde = ps.x.copy()
    n = recover_all_inversions(ps, terms, SolverConfig(dt=0.01))
    assert n > 0
    assert np.array_equal(ps.x, ps.x_tilde)


def test_nan_state_raises():
    ps = ParticleSystem.create(np.zeros((1, 3)), 1.0, v=np.array([[np.nan, 0, 0]]))
    sim = Simulation(ps, en.TermSet.empty(), SolverConfig(dt=0.01))
    with pytest.raises(SimulationError):
        sim.step()


@pytest.mark.parametrize("kw", [
    {"dt": 0.0}, {"dt": 0.01, "iterations": 0}, {"dt": 0.01, "omega": 2.0}, {"dt": 0.01, "omega": 0.9},
    {"dt": 0.01, "mode": "sor"}, {"dt": 0.01, "inversion_fix": "some"}, {"dt": 0.01, "damping": -1.0},
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_config_defaults():
    assert SolverConfig(dt=0.01).omega == 1.0
    assert SolverConfig(dt=0.01, mode="jacobi").omega == 1.5
    assert SolverConfig(dt=0.01, mode="gs").mode == "gauss-seidel"


def test_negative_inverse_mass_rejected():
    with pytest.raises(ValueError):
        ParticleSystem(np.zeros((1, 3)), np.zeros((1, 3)), np.ones(1), -np.ones(1))
