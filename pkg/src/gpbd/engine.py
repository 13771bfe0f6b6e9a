"""Time stepping over per-force displacements.

Each substep predicts x_tilde from inertia and external forces, zeroes the
displacement ledger, then runs GPBD iterations. An iteration is one sweep over
all terms (Gauss-Seidel by color, or Jacobi with per-vertex averaging and
over-relaxation) followed by the projection pass. Every term update adds its
increment to both x and its own ledger entry, so x = x_tilde + sum(d) holds
after every sweep; projections and inversion recovery book their displacement
into x_tilde instead.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .energies import MAX_K, MAX_M, TET_NH, TET_SNH, TermSet, stencil_size, strain_dim
from .local_solver import EPS_ABS, EPS_REL, local_newton
from .mesh import color_elements
from .projections import ProjectionSet, fix_inversion_kernel

log = logging.getLogger(__name__)

GAUSS_SEIDEL = "gauss-seidel"
JACOBI = "jacobi"
MODES = (GAUSS_SEIDEL, JACOBI)
# tets that receive the inversion-recovery projection
FIX_NONE, FIX_LOG, FIX_ALL = range(3)
FIX_MODES = {"none": FIX_NONE, "log": FIX_LOG, "all": FIX_ALL}

# sweep statistics slots
STAT_NEWTON, STAT_FAILED, STAT_INVERTED, STAT_CONVERGED = range(4)


class SimulationError(RuntimeError):
    pass


@dataclass
class ParticleSystem:
    x: np.ndarray  # (n, 3)
    v: np.ndarray  # (n, 3)
    mass: np.ndarray  # (n,)
    inv_mass: np.ndarray  # (n,), 0 for pinned vertices
    x_prev: np.ndarray = None
    x_tilde: np.ndarray = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64).reshape(-1, 3)
        self.v = np.ascontiguousarray(self.v, dtype=np.float64).reshape(-1, 3)
        self.mass = np.ascontiguousarray(self.mass, dtype=np.float64)
        self.inv_mass = np.ascontiguousarray(self.inv_mass, dtype=np.float64)
        if np.any(self.inv_mass < 0):
            raise ValueError("inverse masses must be non-negative")
        if self.x_prev is None:
            self.x_prev = self.x.copy()
        if self.x_tilde is None:
            self.x_tilde = self.x.copy()

    @classmethod
    def create(cls, x, mass, pinned=None, v=None):
        mass = np.broadcast_to(np.asarray(mass, dtype=np.float64), (len(x),)).copy()
        inv = 1.0 / mass
        if pinned is not None:
            inv[np.asarray(pinned, dtype=np.int64)] = 0.0
        v = np.zeros_like(x) if v is None else v
        return cls(np.array(x, dtype=np.float64), np.array(v, dtype=np.float64), mass, inv)

    @property
    def n(self):
        return len(self.x)

    def copy(self):
        return ParticleSystem(
            self.x.copy(), self.v.copy(), self.mass.copy(), self.inv_mass.copy(),
            self.x_prev.copy(), self.x_tilde.copy(),
        )

    def momentum_moment(self):
        """Sum of m_j x_j."""
        return (self.mass[:, None] * self.x).sum(axis=0)

    def kinetic_energy(self):
        free = self.inv_mass > 0
        return 0.5 * float(np.sum(self.mass[free, None] * self.v[free] ** 2))


@dataclass
class SolverConfig:
    dt: float
    substeps: int = 1
    iterations: int = 3  # GPBD iterations per substep
    newton_iterations: int = 1  # Newton budget per local solve
    mode: str = GAUSS_SEIDEL
    omega: float | None = None  # Jacobi over-relaxation; default 1.0 (GS) / 1.5 (Jacobi)
    damping: float = 0.0  # velocity decay rate, 1/s
    eps_abs: float = EPS_ABS
    eps_rel: float = EPS_REL
    inversion_eps: float = 1e-8
    inversion_passes: int = 1  # whole-mesh inversion-recovery passes per projection pass
    inversion_fix: str = "log"  # which tets get the inversion-recovery projection: none | log | all

    def __post_init__(self):
        if self.mode in ("gs", "gauss_seidel"):
            self.mode = GAUSS_SEIDEL
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.omega is None:
            self.omega = 1.5 if self.mode == JACOBI else 1.0
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1 or self.iterations < 1 or self.newton_iterations < 1:
            raise ValueError("substeps, iterations and newton_iterations must be >= 1")
        if not 1.0 <= self.omega < 2.0:
            raise ValueError("omega must lie in [1, 2)")
        if self.inversion_fix not in FIX_MODES:
            raise ValueError(f"unknown inversion_fix {self.inversion_fix!r}")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")

    @property
    def fix_code(self):
        return FIX_MODES[self.inversion_fix]

    @property
    def h(self):
        return self.dt / self.substeps


class DisplacementLedger:
    """Per-term displacement d_i stored on the term's stencil."""

    def __init__(self, n_terms):
        self.d = np.zeros((n_terms, MAX_M, 3))

    def zero(self):
        self.d[:] = 0.0

    def total(self, terms: TermSet, n_vertices):
        """Sum of all d_i scattered to vertices, (n, 3)."""
        out = np.zeros((n_vertices, 3))
        st = terms.stencil
        valid = st >= 0
        np.add.at(out, st[valid], self.d[valid])
        return out

    def residual(self, ps: ParticleSystem, terms: TermSet):
        """max |x - x_tilde - sum d|."""
        r = ps.x - ps.x_tilde - self.total(terms, ps.n)
        return float(np.abs(r).max()) if r.size else 0.0


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _gather(t, stencil, m, x, inv_mass, dt2, d, pos, w, dl):
    for v in range(m):
        j = stencil[t, v]
        w[v] = dt2 * inv_mass[j]
        for i in range(3):
            pos[v, i] = x[j, i]
            dl[v, i] = d[t, v, i]


@njit(cache=True)
def _recover_inversion(t, stencil, rest, x, x_tilde, mass, inv_mass, eps):
    pos = np.empty((4, 3))
    ms = np.empty(4)
    for v in range(4):
        j = stencil[t, v]
        ms[v] = mass[j]
        for i in range(3):
            pos[v, i] = x[j, i]
    out = np.empty((4, 3))
    if not fix_inversion_kernel(pos, rest[t], ms, eps, out):
        return False
    for v in range(4):
        j = stencil[t, v]
        if inv_mass[j] > 0.0:
            for i in range(3):
                delta = out[v, i] - x[j, i]
                x[j, i] += delta
                x_tilde[j, i] += delta
    return True


@njit(cache=True)
def _needs_fix(kd, fix_mode):
    if kd == TET_NH:
        return fix_mode >= FIX_LOG
    if kd == TET_SNH:
        return fix_mode >= FIX_ALL
    return False


@njit(cache=True)
def recover_inversions(kind, stencil, rest, x, x_tilde, mass, inv_mass, eps, fix_mode):
    count = 0
    for t in range(kind.shape[0]):
        if _needs_fix(kind[t], fix_mode):
            if _recover_inversion(t, stencil, rest, x, x_tilde, mass, inv_mass, eps):
                count += 1
    return count


@njit(cache=True)
def gs_sweep_kernel(order, kind, stencil, rest, params, scale, x, x_tilde, mass, inv_mass,
                    dt, d, budget, eps_abs, eps_rel, inv_eps, fix_mode, stats):
    dt2 = dt * dt
    pos = np.zeros((MAX_M, 3))
    w = np.zeros(MAX_M)
    dl = np.zeros((MAX_M, 3))
    dlam = np.zeros(MAX_K)
    dd = np.zeros((MAX_M, 3))
    trace = np.zeros(budget + 1)
    for idx in range(order.shape[0]):
        t = order[idx]
        kd = kind[t]
        m = stencil_size(kd)
        if _needs_fix(kd, fix_mode):
            if _recover_inversion(t, stencil, rest, x, x_tilde, mass, inv_mass, inv_eps):
                stats[STAT_INVERTED] += 1
        _gather(t, stencil, m, x, inv_mass, dt2, d, pos, w, dl)
        iters, conv, failed = local_newton(kd, pos[:m], w[:m], dl[:m], rest[t], params[t], scale[t],
                                           budget, eps_abs, eps_rel, dlam, dd, trace)
        stats[STAT_NEWTON] += iters
        if failed:
            stats[STAT_FAILED] += 1
            continue
        if conv:
            stats[STAT_CONVERGED] += 1
        for v in range(m):
            j = stencil[t, v]
            for i in range(3):
                x[j, i] += dd[v, i]
                d[t, v, i] += dd[v, i]


@njit(cache=True)
def jacobi_sweep_kernel(kind, stencil, rest, params, scale, x, x_tilde, mass, inv_mass,
                        dt, d, budget, eps_abs, eps_rel, inv_eps, fix_mode, omega, degree, stats):
    n_terms = kind.shape[0]
    stats[STAT_INVERTED] += recover_inversions(kind, stencil, rest, x, x_tilde, mass, inv_mass, inv_eps, fix_mode)
    dt2 = dt * dt
    contrib = np.zeros((n_terms, MAX_M, 3))
    ok = np.zeros(n_terms, dtype=np.bool_)
    pos = np.zeros((MAX_M, 3))
    w = np.zeros(MAX_M)
    dl = np.zeros((MAX_M, 3))
    dlam = np.zeros(MAX_K)
    dd = np.zeros((MAX_M, 3))
    trace = np.zeros(budget + 1)
    for t in range(n_terms):
        kd = kind[t]
        m = stencil_size(kd)
        _gather(t, stencil, m, x, inv_mass, dt2, d, pos, w, dl)
        iters, conv, failed = local_newton(kd, pos[:m], w[:m], dl[:m], rest[t], params[t], scale[t],
                                           budget, eps_abs, eps_rel, dlam, dd, trace)
        stats[STAT_NEWTON] += iters
        if failed:
            stats[STAT_FAILED] += 1
            continue
        if conv:
            stats[STAT_CONVERGED] += 1
        ok[t] = True
        for v in range(m):
            for i in range(3):
                contrib[t, v, i] = dd[v, i]
    # deterministic reduction in term order
    acc = np.zeros(x.shape)
    for t in range(n_terms):
        if ok[t]:
            for v in range(stencil_size(kind[t])):
                j = stencil[t, v]
                for i in range(3):
                    acc[j, i] += contrib[t, v, i]
    factor = np.zeros(x.shape[0])
    for j in range(x.shape[0]):
        if degree[j] > 0:
            factor[j] = omega / degree[j]
    for t in range(n_terms):
        if ok[t]:
            for v in range(stencil_size(kind[t])):
                j = stencil[t, v]
                for i in range(3):
                    d[t, v, i] += factor[j] * contrib[t, v, i]
    for j in range(x.shape[0]):
        for i in range(3):
            x[j, i] += factor[j] * acc[j, i]


def term_degree(terms: TermSet, n_vertices):
    """Number of terms whose stencil contains each vertex."""
    st = terms.stencil[terms.stencil >= 0]
    return np.bincount(st, minlength=n_vertices).astype(np.float64)


# ---------------------------------------------------------------------------
# operations


def predict(ps: ParticleSystem, f_ext, dt, ledger: DisplacementLedger | None = None):
    """x_tilde = x + dt v + dt^2 M^-1 f_ext; x = x_tilde; ledger zeroed. Pinned vertices stay put."""
    ps.x_prev = ps.x.copy()
    free = ps.inv_mass > 0
    xt = ps.x.copy()
    f_ext = np.zeros_like(ps.x) if f_ext is None else np.asarray(f_ext, dtype=np.float64).reshape(-1, 3)
    xt[free] += dt * ps.v[free] + dt * dt * ps.inv_mass[free, None] * f_ext[free]
    ps.x_tilde = xt
    ps.x = xt.copy()
    if ledger is not None:
        ledger.zero()
    return ps


def _stats():
    return np.zeros(4, dtype=np.int64)


def sweep_gauss_seidel(ps, ledger, terms: TermSet, coloring, cfg: SolverConfig, dt=None, stats=None):
    """One Gauss-Seidel pass, color by color in coloring order."""
    stats = _stats() if stats is None else stats
    if len(terms) == 0:
        return stats
    dt = cfg.h if dt is None else dt
    gs_sweep_kernel(
        coloring.order, terms.kind, terms.stencil, terms.rest, terms.params, terms.scale,
        ps.x, ps.x_tilde, ps.mass, ps.inv_mass, dt, ledger.d,
        cfg.newton_iterations, cfg.eps_abs, cfg.eps_rel, cfg.inversion_eps, cfg.fix_code, stats,
    )
    return stats


def sweep_jacobi(ps, ledger, terms: TermSet, cfg: SolverConfig, degree=None, dt=None, stats=None):
    """One Jacobi pass: all local solves against the same x, then averaged, over-relaxed updates."""
    stats = _stats() if stats is None else stats
    if len(terms) == 0:
        return stats
    dt = cfg.h if dt is None else dt
    degree = term_degree(terms, ps.n) if degree is None else degree
    jacobi_sweep_kernel(
        terms.kind, terms.stencil, terms.rest, terms.params, terms.scale,
        ps.x, ps.x_tilde, ps.mass, ps.inv_mass, dt, ledger.d,
        cfg.newton_iterations, cfg.eps_abs, cfg.eps_rel, cfg.inversion_eps, cfg.fix_code, cfg.omega, degree, stats,
    )
    return stats


def apply_projections(ps: ParticleSystem, projections: ProjectionSet, t):
    """Run the projection pass and book its displacement into x_tilde."""
    if projections is None or projections.empty:
        return
    before = ps.x.copy()
    projections.apply(ps.x, ps.inv_mass, t)
    ps.x_tilde += ps.x - before


def recover_all_inversions(ps: ParticleSystem, terms: TermSet, cfg: SolverConfig):
    """Whole-mesh inversion recovery, repeated until nothing changes or the pass cap.

    Returns the number of tet fixes; displacement is booked into x_tilde.
    """
    total = 0
    for _ in range(cfg.inversion_passes):
        n = recover_inversions(terms.kind, terms.stencil, terms.rest, ps.x, ps.x_tilde, ps.mass,
                               ps.inv_mass, cfg.inversion_eps, cfg.fix_code)
        total += n
        if n == 0:
            break
    return total


@dataclass
class SweepRecord:
    step: int
    substep: int
    sweep: int
    residual: float
    max_penetration: float
    energy: float
    sweep_time: float
    projection_time: float
    newton_iterations: int
    failed: int
    inverted: int


@dataclass
class Simulation:
    """Particles, terms and projections advanced together."""

    ps: ParticleSystem
    terms: TermSet
    cfg: SolverConfig
    projections: ProjectionSet = field(default_factory=ProjectionSet)
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    external_force: object = None  # callable(sim) -> (n, 3) extra force
    time: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        self.ledger = DisplacementLedger(len(self.terms))
        self.coloring = color_elements(self.terms.stencils()) if len(self.terms) else None
        self.degree = term_degree(self.terms, self.ps.n)
        self.on_sweep = None  # callable(sim, SweepRecord)
        self.track_energy = True
        self.last_stats = _stats()
        self.has_tets = bool(np.any((self.terms.kind == TET_NH) | (self.terms.kind == TET_SNH)))

    def forces(self):
        f = self.ps.mass[:, None] * self.gravity[None, :]
        if self.external_force is not None:
            f = f + self.external_force(self)
        return f

    def energy(self, v=None):
        """Elastic + kinetic + gravitational energy (``v`` defaults to the stored velocity)."""
        ps = self.ps
        free = ps.inv_mass > 0
        v = ps.v if v is None else v
        kin = 0.5 * float(np.sum(ps.mass[free, None] * v[free] ** 2))
        grav = -float(np.sum(ps.mass[free] * (ps.x[free] @ self.gravity)))
        return self.terms.energy(ps.x) + kin + grav

    def project(self, t, stats=None):
        """Projection pass: pins, colliders, two-way spheres, then inversion recovery."""
        apply_projections(self.ps, self.projections, t)
        if self.has_tets:
            n = recover_all_inversions(self.ps, self.terms, self.cfg)
            if stats is not None:
                stats[STAT_INVERTED] += n

    def sweep(self, stats=None):
        if self.cfg.mode == JACOBI:
            return sweep_jacobi(self.ps, self.ledger, self.terms, self.cfg, self.degree, stats=stats)
        return sweep_gauss_seidel(self.ps, self.ledger, self.terms, self.coloring, self.cfg, stats=stats)

    def step(self):
        """Advance by cfg.dt."""
        return step(self)


def step(sim: Simulation):
    cfg = sim.cfg
    ps = sim.ps
    h = cfg.h
    stats = _stats()
    for sub in range(cfg.substeps):
        t_end = sim.time + h
        predict(ps, sim.forces(), h, sim.ledger)
        sim.projections.begin_substep(h, sim.gravity)
        sim.project(t_end, stats)
        for it in range(cfg.iterations):
            before = stats.copy()
            t0 = time.perf_counter()
            sim.sweep(stats)
            t1 = time.perf_counter()
            sim.project(t_end, stats)
            t2 = time.perf_counter()
            if sim.on_sweep is not None:
                delta = stats - before
                rec = SweepRecord(
                    step=sim.step_count, substep=sub, sweep=it,
                    residual=sim.ledger.residual(ps, sim.terms),
                    max_penetration=sim.projections.max_penetration(ps.x, ps.inv_mass),
                    energy=sim.energy((ps.x - ps.x_prev) / h) if sim.track_energy else float("nan"),
                    sweep_time=t1 - t0, projection_time=t2 - t1,
                    newton_iterations=int(delta[STAT_NEWTON]), failed=int(delta[STAT_FAILED]),
                    inverted=int(delta[STAT_INVERTED]),
                )
                sim.on_sweep(sim, rec)
        ps.v = (ps.x - ps.x_prev) / h
        if cfg.damping > 0:
            ps.v *= max(0.0, 1.0 - cfg.damping * h)
        sim.projections.end_substep(h)
        sim.time = t_end
        bad = ~np.all(np.isfinite(ps.x), axis=1) | ~np.all(np.isfinite(ps.v), axis=1)
        if bad.any():
            raise SimulationError(f"non-finite state at vertex {int(np.nonzero(bad)[0][0])} (t={sim.time:.6g})")
    sim.step_count += 1
    sim.last_stats = stats
    return stats
