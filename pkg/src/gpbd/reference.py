"""Verification oracles: plain XPBD over compliant constraints and a dense
global Newton solver for backward Euler. Both are single-threaded and meant
for small scenes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .energies import DISTANCE, PIN, EnergyDomainError, TermSet
from .engine import ParticleSystem, predict
from .local_solver import make_psd

log = logging.getLogger(__name__)

COMPLIANT_KINDS = (DISTANCE, PIN)


class OracleError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# XPBD


def _alpha(term):
    # distance: (rest, alpha); pin: (target xyz, alpha)
    return float(term.params[1] if term.kind == DISTANCE else term.params[3])


def _constraint_rows(term, x):
    """Constraint values and gradients, shape (k,), (k, m, 3)."""
    c, S, _ = term.raw_strain(x, jacobian=True)
    return c, S.reshape(term.k, term.m, 3)


def xpbd_project(term, x, inv_mass, lam, dt):
    """One XPBD update of a compliant term; updates ``x`` and returns the new multipliers.

    Pin terms carry three independent scalar constraints (one per axis) and
    are projected row by row.
    """
    if term.kind not in COMPLIANT_KINDS:
        raise TypeError(f"{term!r} is not a compliant constraint")
    alpha_t = _alpha(term) / (dt * dt)
    lam = np.array(lam, dtype=np.float64).reshape(term.k)
    w = inv_mass[term.stencil]
    for r in range(term.k):
        c, grad = _constraint_rows(term, x)
        denom = float(np.sum(w[:, None] * grad[r] ** 2)) + alpha_t
        if denom == 0.0:
            log.debug("skipping %r: zero denominator", term)
            continue
        dlam = -(c[r] + alpha_t * lam[r]) / denom
        lam[r] += dlam
        x[term.stencil] += w[:, None] * dlam * grad[r]
    return lam


@dataclass
class XpbdState:
    lam: np.ndarray  # (n_terms, 3)

    @classmethod
    def zeros(cls, n_terms):
        return cls(np.zeros((n_terms, 3)))

    def reset(self):
        self.lam[:] = 0.0


def xpbd_iterate(ps: ParticleSystem, terms: TermSet, state: XpbdState, dt):
    """One Gauss-Seidel pass over all terms in index order."""
    for i in range(len(terms)):
        t = terms[i]
        state.lam[i, : t.k] = xpbd_project(t, ps.x, ps.inv_mass, state.lam[i, : t.k], dt)


def xpbd_step(ps: ParticleSystem, terms: TermSet, dt, iterations, gravity=None, substeps=1):
    """Advance ``ps`` by dt with XPBD (multipliers reset every substep)."""
    h = dt / substeps
    state = XpbdState.zeros(len(terms))
    g = np.zeros(3) if gravity is None else np.asarray(gravity, dtype=np.float64)
    for _ in range(substeps):
        predict(ps, ps.mass[:, None] * g[None, :], h)
        state.reset()
        for _ in range(iterations):
            xpbd_iterate(ps, terms, state, h)
        ps.v = (ps.x - ps.x_prev) / h
    return state


# ---------------------------------------------------------------------------
# global backward Euler


def _spring_hessian(term, x):
    """Exact Hessian of alpha^-1/2 (|x1-x0| - r)^2, shape (6, 6)."""
    p = x[term.stencil]
    e = p[1] - p[0]
    L = np.linalg.norm(e)
    n = e / L
    r, alpha = term.params[0], term.params[1]
    K = (np.outer(n, n) + (L - r) / L * (np.eye(3) - np.outer(n, n))) / alpha
    return np.block([[K, -K], [-K, K]])


def _fd_hessian(term, x, h=1e-6):
    """Central differences of the analytic gradient on the stencil."""
    p = x[term.stencil].copy()
    n = 3 * term.m
    H = np.empty((n, n))
    for c in range(n):
        v, i = divmod(c, 3)
        hp = h * max(1.0, abs(p[v, i]))
        p[v, i] += hp
        gp = term.gradient(p, local=True).ravel()
        p[v, i] -= 2 * hp
        gm = term.gradient(p, local=True).ravel()
        p[v, i] += hp
        H[:, c] = (gp - gm) / (2 * hp)
    return 0.5 * (H + H.T)


def _pin_hessian(term):
    return np.eye(3) / term.params[3]


def term_hessian(term, x):
    if term.kind == DISTANCE:
        return _spring_hessian(term, x)
    if term.kind == PIN:
        return _pin_hessian(term)
    return _fd_hessian(term, x)


def _check_oracle_terms(terms):
    for i in range(len(terms)):
        t = terms[i]
        if t.kind in COMPLIANT_KINDS and _alpha(t) == 0.0:
            raise OracleError(f"{t!r}: hard constraints have no backward-Euler energy")


def internal_gradient(terms: TermSet, x):
    g = np.zeros_like(x)
    for i in range(len(terms)):
        t = terms[i]
        g[t.stencil] += t.gradient(x)
    return g


def internal_hessian(terms: TermSet, x):
    n = 3 * len(x)
    H = np.zeros((n, n))
    for i in range(len(terms)):
        t = terms[i]
        dofs = (3 * t.stencil[:, None] + np.arange(3)).ravel()
        H[np.ix_(dofs, dofs)] += term_hessian(t, x)
    return H


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def be_residual(terms, x, x_tilde, mass, inv_mass, dt):
    """|M(x - x_tilde) - dt^2 sum f(x)| over free coordinates."""
    r = mass[:, None] * (x - x_tilde) + dt * dt * internal_gradient(terms, x)
    return float(np.linalg.norm(r[inv_mass > 0]))


def newton_backward_euler(terms: TermSet, x_tilde, mass, inv_mass, dt, tol=1e-10, x0=None, max_iter=200):
    """Solve M(x - x_tilde) = dt^2 sum f(x) for the free vertices; pinned ones stay at x_tilde."""
    _check_oracle_terms(terms)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    x = x_tilde.copy() if x0 is None else np.array(x0, dtype=np.float64)
    free = inv_mass > 0
    x[~free] = x_tilde[~free]
    dofs = np.repeat(free, 3)
    dt2 = dt * dt

    def merit(y):
        try:
            u = terms.energy(y)
        except EnergyDomainError:
            return np.inf
        if not np.isfinite(u):
            return np.inf
        return 0.5 * float(np.sum(mass[:, None] * (y - x_tilde) ** 2)) + dt2 * u

    fx = merit(x)
    if not np.isfinite(fx):
        raise OracleError("initial guess outside the admissible domain")
    for it in range(max_iter + 1):
        g = (mass[:, None] * (x - x_tilde) + dt2 * internal_gradient(terms, x)).ravel()[dofs]
        res = float(np.linalg.norm(g))
        if res <= tol:
            return NewtonResult(x, it, res, True)
        if it == max_iter:
            break
        H = dt2 * internal_hessian(terms, x)[np.ix_(dofs, dofs)]
        H[np.diag_indices_from(H)] += np.repeat(mass[free], 3)
        try:
            L = scipy.linalg.cho_factor(H)
        except np.linalg.LinAlgError:
            L = scipy.linalg.cho_factor(make_psd(H))
        p = -scipy.linalg.cho_solve(L, g)
        step = 1.0
        for _ in range(40):
            y = x.copy()
            y.ravel()[np.flatnonzero(dofs)] += step * p
            fy = merit(y)
            if fy <= fx + 1e-4 * step * float(g @ p):
                break
            step *= 0.5
        else:
            # merit stagnates at round-off level; accept the full step if it lowers the residual
            y = x.copy()
            y.ravel()[np.flatnonzero(dofs)] += p
            fy = merit(y)
            if not np.isfinite(fy):
                break
        x, fx = y, fy
    log.warning("backward Euler Newton stopped with residual %.3e", res)
    return NewtonResult(x, max_iter, res, False)


def backward_euler_step(ps: ParticleSystem, terms: TermSet, dt, gravity=None, tol=1e-10):
    """Advance ``ps`` by one backward Euler step using the Newton oracle."""
    g = np.zeros(3) if gravity is None else np.asarray(gravity, dtype=np.float64)
    predict(ps, ps.mass[:, None] * g[None, :], dt)
    result = newton_backward_euler(terms, ps.x_tilde, ps.mass, ps.inv_mass, dt, tol)
    if not result.converged:
        raise OracleError(f"Newton did not converge (residual {result.residual:.3e})")
    ps.x = result.x
    ps.v = (ps.x - ps.x_prev) / dt
    return result
