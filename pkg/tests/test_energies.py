import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from gpbd import energies as en
from gpbd.mesh import TetMesh, TriMesh, generate_cube_tets, generate_grid_cloth

TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
QUAD = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])


def one_tet(variant="log", mu=1.0, lam=5.0):
    return en.tet_terms(TetMesh(TET, [[0, 1, 2, 3]]), en.NeoHookeanParams(mu, lam, variant))[0]


def two_tris():
    return TriMesh(QUAD, [[0, 1, 2], [1, 3, 2]])


def all_terms(rng):
    """(term, perturbed stencil positions) for every model."""
    xt = TET + rng.normal(scale=0.1, size=(4, 3))
    xc = QUAD + rng.normal(scale=0.1, size=(4, 3))
    xs = rng.uniform(0, 1, (2, 3))
    pairs = [
        (one_tet("log"), xt),
        (one_tet("stable"), xt),
        (en.membrane_terms(two_tris(), 3.0)[0], xc),
        (en.hinge_terms(two_tris(), 0.2)[0], xc),
        (en.distance_terms([[0, 1]], [0.5], 0.1)[0], xs),
        (en.pin_terms([0], [[0.2, 0.3, 0.4]], 0.1)[0], xs),
    ]
    return [(t, x[t.stencil]) for t, x in pairs]


def fd(f, p, h=1e-6):
    p = p.copy()
    out = []
    for c in range(p.size):
        v, a = divmod(c, 3)
        p[v, a] += h
        fp = np.atleast_1d(f(p))
        p[v, a] -= 2 * h
        fm = np.atleast_1d(f(p))
        p[v, a] += h
        out.append((fp - fm) / (2 * h))
    return np.array(out).T


def test_deformation_gradient_identity_and_scale():
    t = one_tet()
    assert np.allclose(en.eval_deformation_gradient(t, TET), np.eye(3))
    assert np.allclose(en.eval_deformation_gradient(t, 2 * TET), 2 * np.eye(3))


def test_triangle_deformation_gradient_at_rest():
    t = en.membrane_terms(two_tris(), 1.0)[1]
    F = en.eval_deformation_gradient(t, QUAD)
    assert np.allclose(F.T @ F, np.eye(2))
    assert np.allclose(F[2], 0.0)  # spans the z=0 face


def test_deformation_gradient_matches_affine_map():
    rng = np.random.default_rng(3)
    A = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
    b = rng.normal(size=3)
    x = TET @ A.T + b
    assert np.allclose(en.eval_deformation_gradient(one_tet(), x), A)


@pytest.mark.parametrize("variant", ["log", "stable"])
def test_nh_rest_energy_zero(variant):
    p = en.NeoHookeanParams(3.0, 7.0, variant)
    assert en.nh_energy(np.eye(3), 1.0, p) == pytest.approx(0.0, abs=1e-14)


def test_nh_uniaxial_values():
    F = np.diag([2.0, 1.0, 1.0])
    assert en.nh_energy(F, 1.0, en.NeoHookeanParams(1.0, 0.0, "log")) == pytest.approx(1.5 - np.log(2))
    assert en.nh_energy(F, 1.0, en.NeoHookeanParams(1.0, 0.0, "stable")) == pytest.approx(0.5)


def test_nh_log_rejects_inverted():
    with pytest.raises(en.EnergyDomainError):
        en.nh_energy(np.diag([1.0, 1.0, -1.0]), 1.0, en.NeoHookeanParams(1.0, 1.0, "log"))


@pytest.mark.parametrize("variant", ["log", "stable"])
def test_term_energy_matches_matrix_formula(variant):
    rng = np.random.default_rng(4)
    t = one_tet(variant, 2.0, 3.0)
    for _ in range(20):
        x = TET + rng.normal(scale=0.1, size=(4, 3))
        F = en.eval_deformation_gradient(t, x)
        ref = en.nh_energy(F, 1 / 6, en.NeoHookeanParams(2.0, 3.0, variant))
        assert t.energy(x) == pytest.approx(ref, rel=1e-10)


def test_green_strain_examples():
    assert np.allclose(en.green_strain_vector(np.eye(3)), 0.0)
    assert np.allclose(en.green_strain_vector(np.diag([2.0, 1.0, 1.0])), [1.5, 0, 0, 0, 0, 0])


def test_green_strain_random():
    rng = np.random.default_rng(5)
    for _ in range(10):
        F = rng.normal(size=(3, 3))
        E = 0.5 * (F.T @ F - np.eye(3))
        s = en.green_strain_vector(F)
        assert np.allclose(s, [E[0, 0], E[1, 1], E[2, 2], E[0, 1], E[0, 2], E[1, 2]])


def test_distance_jacobian_by_hand():
    t = en.distance_terms([[0, 1]], [1.0], 0.0)[0]
    x = np.array([[0, 0, 0], [1, 0, 0.0]])
    assert np.allclose(en.strain_jacobian(t, x), [[-1, 0, 0, 1, 0, 0]])


def test_jacobian_matches_fd():
    rng = np.random.default_rng(6)
    for _ in range(20):
        for t, x in all_terms(rng):
            S = t.jacobian(x, local=True)
            ref = fd(lambda p: t.strain(p, local=True), x)
            assert S.shape == (t.k, 3 * t.m)
            assert np.linalg.norm(S - ref) <= 1e-5 * max(np.linalg.norm(ref), 1.0)


def test_jacobian_translation_invariant():
    rng = np.random.default_rng(7)
    for t, x in all_terms(rng):
        if t.kind == en.PIN:
            continue
        S = t.jacobian(x, local=True)
        tv = np.tile(rng.normal(size=3), t.m)
        assert np.allclose(S @ tv, 0.0, atol=1e-12)


def test_compliant_reduced_example():
    t = en.distance_terms([[0, 1]], [1.0], 2.0)[0]
    U, g, H = en.reduced_energy_derivatives(t, [3.0])
    assert (U, g[0], H[0, 0]) == pytest.approx((2.25, 1.5, 0.5))


def test_hinge_at_rest_angle():
    t = en.hinge_terms(two_tris(), 0.3)[0]
    U, g, _ = t.reduced(t.strain(QUAD))
    assert U == 0.0
    assert np.allclose(g, 0.0)
    assert np.allclose(t.gradient(QUAD), 0.0)


def test_reduced_gradient_and_hessian_match_fd():
    rng = np.random.default_rng(8)
    for t, x in all_terms(rng):
        s = t.strain(x, local=True)
        _, g, H = t.reduced(s)
        assert np.allclose(H, H.T)
        h = 1e-6
        for a in range(t.k):
            e = np.zeros(t.k)
            e[a] = h
            Up, gp, _ = t.reduced(s + e)
            Um, gm, _ = t.reduced(s - e)
            assert (Up - Um) / (2 * h) == pytest.approx(g[a], rel=1e-4, abs=1e-7)
            assert np.allclose((gp - gm) / (2 * h), H[:, a], rtol=1e-4, atol=1e-6)


def test_force_matches_fd_every_model():
    rng = np.random.default_rng(9)
    for _ in range(20):
        for t, x in all_terms(rng):
            f = t.force(x, local=True).ravel()
            ref = -fd(lambda p: t.energy(p, local=True), x).ravel()
            assert np.linalg.norm(f - ref) <= 1e-4 * max(np.linalg.norm(ref), 1e-8)


def test_forces_sum_to_zero():
    rng = np.random.default_rng(10)
    for t, x in all_terms(rng):
        if t.kind == en.PIN:
            continue
        assert np.allclose(t.force(x, local=True).sum(axis=0), 0.0, atol=1e-10)


def test_dihedral_examples():
    flat = QUAD[[1, 2, 0, 3]]
    assert en.dihedral_angle(flat) == pytest.approx(0.0)
    folded = flat.copy()
    mid = 0.5 * (QUAD[1] + QUAD[2])
    folded[3] = mid + np.array([0, 0, np.linalg.norm(QUAD[3] - mid)])
    assert abs(en.dihedral_angle(folded)) == pytest.approx(np.pi / 2)


def test_dihedral_matches_normal_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        p = rng.normal(size=(4, 3))
        e = p[1] - p[0]
        n1 = np.cross(e, p[2] - p[0])
        n2 = np.cross(p[3] - p[0], e)
        n1 /= np.linalg.norm(n1)
        n2 /= np.linalg.norm(n2)
        ref = np.arctan2(np.cross(n1, n2) @ e / np.linalg.norm(e), n1 @ n2)
        assert en.dihedral_angle(p) == pytest.approx(ref, abs=1e-10)


rotations = st.integers(0, 2**31 - 1).map(lambda s: Rotation.random(random_state=s).as_matrix())
shifts = st.tuples(*[st.floats(-10, 10)] * 3).map(np.array)


@settings(max_examples=30, deadline=None)
@given(rotations, shifts, st.integers(0, 1000))
def test_rotation_and_translation_invariance(R, t, seed):
    rng = np.random.default_rng(seed)
    for term, x in all_terms(rng):
        if term.kind == en.PIN:
            continue
        y = x @ R.T + t
        s0, s1 = term.strain(x, local=True), term.strain(y, local=True)
        assert np.allclose(s0, s1, rtol=1e-8, atol=1e-8)
        assert term.energy(y, local=True) == pytest.approx(term.energy(x, local=True), rel=1e-8, abs=1e-12)


def test_lame_parameters():
    mu, lam = en.lame_parameters(1e5, 0.25)
    assert mu == pytest.approx(4e4)
    assert lam == pytest.approx(4e4)
    with pytest.raises(ValueError):
        en.lame_parameters(1e5, 0.5)


def test_param_validation():
    with pytest.raises(ValueError):
        en.NeoHookeanParams(0.0, 1.0)
    with pytest.raises(ValueError):
        en.NeoHookeanParams(1.0, -1.0)
    with pytest.raises(ValueError):
        en.ClothParams(0.0, 1.0)
    with pytest.raises(ValueError):
        en.distance_terms([[0, 1]], [1.0], -1.0)


def test_termset_energy_sums_terms():
    m = generate_cube_tets(2)
    terms = en.tet_terms(m, en.NeoHookeanParams.from_young(1e3, 0.3, "stable"))
    x = m.vertices * [1.1, 1.0, 0.95]
    assert terms.energy(x) == pytest.approx(sum(terms[i].energy(x) for i in range(len(terms))))
    assert terms.energy(m.vertices) == pytest.approx(0.0, abs=1e-9)


def test_cloth_terms_rest_energy_zero():
    m = generate_grid_cloth(5, 5, 0.25)
    terms = en.cloth_terms(m, en.ClothParams(100.0, 0.01))
    assert len(terms) == len(m.triangles) + len(m.hinges)
    assert terms.energy(m.vertices) == pytest.approx(0.0, abs=1e-12)


def test_concat_and_select():
    a = en.distance_terms([[0, 1]], [1.0], 0.0)
    b = en.pin_terms([2], [[0, 0, 0]], 0.0)
    c = en.TermSet.concat(a, b, None)
    assert len(c) == 2
    assert len(c.select(c.kind == en.PIN)) == 1
    assert len(en.TermSet.concat()) == 0
