"""Oracle comparison checks behind ``gpbd verify``.

Each check returns a CheckResult. The quick suite runs in a few seconds; the
full suite uses the sample counts of the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import energies as en
from .engine import ParticleSystem, Simulation, SimulationError, SolverConfig
from .local_solver import LocalProblem, objective, objective_grad_hess, solve_local
from .mesh import TetMesh, TriMesh, color_elements, coloring_is_valid, generate_cube_tets, generate_grid_cloth
from .reference import backward_euler_step, xpbd_project


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.value <= self.tolerance)

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.3e} (tol {self.tolerance:.0e})"


def random_compliant_instance(rng):
    """Two-particle distance constraint with random masses, compliance, multiplier and dt."""
    x = rng.uniform(0, 1, (2, 3))
    inv = 1.0 / rng.uniform(0.1, 10, 2)
    alpha = 0.0 if rng.random() < 0.25 else 10 ** rng.uniform(-6, -2)
    dt = float(rng.choice([1e-3, 1e-2]))
    rest = rng.uniform(0.1, 1.5)
    lam = rng.normal() * 1e-3
    return x, inv, alpha, dt, rest, lam


def gpbd_vs_xpbd(x, inv, alpha, dt, rest, lam):
    """Increments (xpbd, gpbd, scale) for one update from a state carrying multiplier ``lam``.

    ``scale`` is the size the increment would have without cancellation
    between the constraint value and the compliance term; when the two nearly
    cancel, both updates are only defined to round-off of that scale.
    """
    term = en.distance_terms([[0, 1]], [rest], alpha)[0]
    e = x[1] - x[0]
    n = e / np.linalg.norm(e)
    d = inv[:, None] * lam * np.stack([-n, n])  # d = M^-1 lam grad c
    xa = x.copy()
    xpbd_project(term, xa, inv, [lam], dt)
    sol = solve_local(LocalProblem(term, x, d, dt * dt * inv, newton_budget=1))
    c = np.linalg.norm(e) - rest
    at = alpha / dt**2
    denom = inv.sum() + at
    scale = inv.max() * (abs(c) + abs(at * lam)) / denom
    return xa - x, sol.dd, scale


def xpbd_equivalence(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        dx_x, dx_g, scale = gpbd_vs_xpbd(*random_compliant_instance(rng))
        ref = max(np.abs(dx_x).max(), scale, 1e-300)
        worst = max(worst, float(np.abs(dx_x - dx_g).max() / ref))
    return CheckResult("one GPBD update equals one XPBD update (relative)", worst, 1e-10)


def spring_grid_gap(steps=50, iterations=50, dt=0.002, compliance=1e-4):
    """Per-step max position gap between GPBD and the backward Euler oracle from shared states."""
    mesh = generate_grid_cloth(10, 10, 0.1)
    terms = en.spring_terms(mesh.vertices, mesh.edges, compliance)
    g = np.array([0.0, 0.0, -9.81])
    ps = ParticleSystem.create(mesh.vertices, 0.01, pinned=[0, 9])
    sim = Simulation(ps, terms, SolverConfig(dt=dt, iterations=iterations, newton_iterations=1), gravity=g)
    worst = 0.0
    for _ in range(steps):
        ref = ps.copy()
        backward_euler_step(ref, terms, dt, g, tol=1e-9)
        sim.step()
        worst = max(worst, float(np.abs(ps.x - ref.x).max()))
        ps.x[:] = ref.x
        ps.v[:] = ref.v
    return CheckResult("spring grid vs backward Euler, per-step position gap (m)", worst, 1e-5)


def sample_terms(rng):
    """One perturbed instance of every energy model: (terms, positions)."""
    tet = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    tm = TetMesh(tet, [[0, 1, 2, 3]])
    xt = tet + rng.normal(scale=0.1, size=(4, 3))
    quad = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
    cloth = TriMesh(quad, [[0, 1, 2], [1, 3, 2]])
    xc = quad + rng.normal(scale=0.1, size=(4, 3))
    xs = rng.uniform(0, 1, (2, 3))
    return [
        (en.tet_terms(tm, en.NeoHookeanParams(1.0, 5.0, "log")), xt),
        (en.tet_terms(tm, en.NeoHookeanParams(1.0, 5.0, "stable")), xt),
        (en.membrane_terms(cloth, 3.0), xc),
        (en.hinge_terms(cloth, 0.2), xc),
        (en.distance_terms([[0, 1]], [0.5], 0.1), xs),
        (en.pin_terms([0], [[0.2, 0.3, 0.4]], 0.1), xs),
    ]


def fd_gradient(term, x, h=1e-6):
    p = x[term.stencil].copy()
    fd = np.zeros(p.size)
    for c in range(p.size):
        v, a = divmod(c, 3)
        p[v, a] += h
        ep = term.energy(p, local=True)
        p[v, a] -= 2 * h
        em = term.energy(p, local=True)
        p[v, a] += h
        fd[c] = (ep - em) / (2 * h)
    return fd


def force_gradient_check(samples=100, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        for terms, x in sample_terms(rng):
            t = terms[0]
            g = t.gradient(x).ravel()
            fd = fd_gradient(t, x)
            worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8)))
    return CheckResult("analytic force vs finite differences (relative)", worst, 1e-4)


def objective_gradient_check(samples=100, seed=2, h=1e-6):
    """Reduced-space gradient of the local objective vs central differences, every model."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        for terms, x in sample_terms(rng):
            t = terms[0]
            prob = LocalProblem(t, x[t.stencil], rng.normal(scale=0.01, size=(t.m, 3)), rng.uniform(0.05, 0.2, t.m))
            dlam = rng.normal(scale=0.02, size=t.k)
            g, _ = objective_grad_hess(prob, dlam)
            fd = np.array([(objective(prob, dlam + h * e) - objective(prob, dlam - h * e)) / (2 * h) for e in np.eye(t.k)])
            worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8)))
    return CheckResult("local objective gradient vs finite differences (relative)", worst, 1e-5)


def coloring_check():
    stencil_sets = [
        en.cloth_terms(generate_grid_cloth(17, 17, 0.1), en.ClothParams(1.0, 0.1)).stencils(),
        list(generate_cube_tets(4).tets),
    ]
    bad = sum(0 if coloring_is_valid(st, color_elements(st)) else 1 for st in stencil_sets)
    return CheckResult("invalid colorings", float(bad), 0.0)


def run_all(quick=True):
    return [
        xpbd_equivalence(200 if quick else 1000),
        force_gradient_check(5 if quick else 100),
        objective_gradient_check(5 if quick else 100),
        spring_grid_gap(10 if quick else 50),
        coloring_check(),
    ]


STRETCH_SCENE = """
name: stretch_{variant}_{nu}
mesh: {{type: cube, n: {n}, edge: 1.0}}
material: {{model: neo_hookean, density: 1000.0, youngs_modulus: 1.0e+5, poisson_ratio: {nu}, variant: {variant}}}
solver: {{dt: {dt}, iterations: {iterations}, newton_iterations: {newton}}}
gravity: [0.0, 0.0, 0.0]
pins:
  - where: [{{x: min}}]
  - where: [{{x: max}}]
    motion: {{type: keyframes, times: [0.0, 1.0], offsets: [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]}}
"""


@dataclass
class StabilityReport:
    nu: float
    variant: str
    steps: int
    finite: bool
    max_energy: float
    reference_energy: float
    bound_factor: float = 100.0

    @property
    def stable(self):
        return self.finite and self.max_energy <= self.bound_factor * self.reference_energy

    def line(self):
        state = "stable" if self.stable else "UNSTABLE"
        return (f"{self.variant} nu={self.nu}: {state} after {self.steps} steps, "
                f"max energy {self.max_energy:.3e} J ({self.max_energy / self.reference_energy:.2f}x reference)")


def stretch_stability(nu, variant, iterations, newton, n=8, seconds=2.0, dt=0.001):
    """Run the two-face stretch (right face pulled out by half the edge over 1 s).

    Stable means finite state and total energy at every step, with the maximum
    below 100x the energy of the isochoric uniaxial stretch to 1.5x (a lower
    bound on the elastic energy of the held-face solution).
    """
    from .scenes import build_scene, parse_scene

    spec = parse_scene(STRETCH_SCENE.format(variant=variant, nu=nu, n=n, dt=dt, iterations=iterations, newton=newton))
    sim = build_scene(spec, None).sim
    mu = 1.0e5 / (2 * (1 + nu))
    ref = 0.5 * mu * (1.5**2 + 2 / 1.5 - 3.0)
    steps = int(round(seconds / dt))
    worst = 0.0
    finite = True
    done = 0
    for k in range(steps):
        try:
            sim.step()
        except SimulationError:
            finite = False
            break
        e = sim.energy()
        done = k + 1
        if not np.isfinite(e):
            finite = False
            break
        worst = max(worst, e)
    return StabilityReport(nu, variant, done, finite, worst, ref)
