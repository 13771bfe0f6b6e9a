"""Per-term reduced Newton projection.

For one term with current stencil positions x, accumulated displacement d and
W = dt^2 M^-1, the increment is restricted to ``dd = W S^T dlam`` (S held at x)
and ``dlam`` minimizes

    1/2 |d + W S^T dlam|^2_{W^-1} + U(x + W S^T dlam)

with damped Newton: Gauss-Newton Hessian at the displaced state, PSD repair by
QR sweeps plus a Gershgorin bound, and Armijo backtracking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .energies import (
    MAX_K,
    MAX_M,
    EnergyDomainError,
    ForceTerm,
    energy_weight,
    eval_strain,
    reduced,
    stencil_size,
    strain_dim,
)

EPS_ABS = 1e-10
EPS_REL = 1e-6
ARMIJO_C1 = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 20
QR_SWEEPS = 5


# ---------------------------------------------------------------------------
# small dense linear algebra


@njit(cache=True)
def _qr_mgs(A, k, Q, R, v):
    for j in range(k):
        for c in range(k):
            v[c] = A[c, j]
        for i in range(j):
            r = 0.0
            for c in range(k):
                r += Q[c, i] * v[c]
            R[i, j] = r
            for c in range(k):
                v[c] -= r * Q[c, i]
        nrm = 0.0
        scale = 0.0
        for c in range(k):
            nrm += v[c] * v[c]
            scale = max(scale, abs(A[c, j]))
        nrm = math.sqrt(nrm)
        R[j, j] = nrm
        for i in range(j + 1, k):
            R[i, j] = 0.0
        if nrm > 1e-14 * max(scale, 1e-300):
            for c in range(k):
                Q[c, j] = v[c] / nrm
        else:
            # rank-deficient column: complete Q with an orthonormal direction
            R[j, j] = 0.0
            for e in range(k):
                for c in range(k):
                    v[c] = 0.0
                v[e] = 1.0
                for i in range(j):
                    r = Q[e, i]
                    for c in range(k):
                        v[c] -= r * Q[c, i]
                un = 0.0
                for c in range(k):
                    un += v[c] * v[c]
                un = math.sqrt(un)
                if un > 0.5:
                    for c in range(k):
                        Q[c, j] = v[c] / un
                    break


@njit(cache=True)
def gershgorin_after_qr(H, k, sweeps):
    """Lower eigenvalue bound of H from the Gershgorin discs of its QR iterate."""
    # normalize so Gram-Schmidt norms neither underflow nor overflow
    scale = 0.0
    for i in range(k):
        for j in range(k):
            scale = max(scale, abs(H[i, j]))
    if scale == 0.0:
        return 0.0
    A = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            A[i, j] = H[i, j] / scale
    Q = np.zeros((k, k))
    R = np.zeros((k, k))
    v = np.empty(k)
    for _ in range(sweeps):
        _qr_mgs(A, k, Q, R, v)
        # A = R Q (R upper triangular)
        for i in range(k):
            for j in range(k):
                acc = 0.0
                for c in range(i, k):
                    acc += R[i, c] * Q[c, j]
                A[i, j] = acc
    bound = np.inf
    for i in range(k):
        off = 0.0
        for j in range(k):
            if j != i:
                off += abs(A[i, j])
        bound = min(bound, A[i, i] - off)
    return bound * scale


@njit(cache=True)
def make_psd_kernel(H, k, out):
    """Write the repaired Hessian into ``out``; returns the diagonal shift applied."""
    for i in range(k):
        for j in range(k):
            out[i, j] = H[i, j]
    bound = gershgorin_after_qr(H, k, QR_SWEEPS)
    if bound < 0.0:
        tr = 0.0
        for i in range(k):
            tr += abs(H[i, i])
        shift = -bound + 1e-8 * max(1.0, tr / k)
        for i in range(k):
            out[i, i] += shift
        return shift
    return 0.0


@njit(cache=True)
def _cholesky_solve(H, b, k, x):
    L = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1):
            acc = H[i, j]
            for c in range(j):
                acc -= L[i, c] * L[j, c]
            if i == j:
                if not acc > 0.0:
                    return False
                L[i, i] = math.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    y = np.zeros(k)
    for i in range(k):
        acc = b[i]
        for c in range(i):
            acc -= L[i, c] * y[c]
        y[i] = acc / L[i, i]
    for i in range(k - 1, -1, -1):
        acc = y[i]
        for c in range(i + 1, k):
            acc -= L[c, i] * x[c]
        x[i] = acc / L[i, i]
    for i in range(k):
        if not np.isfinite(x[i]):
            return False
    return True


# ---------------------------------------------------------------------------
# objective pieces


@njit(cache=True)
def _setup(kind, pos, w, d, rest, params, scale, S, WSt, A, Sd):
    """Fixed quantities at dlam = 0: scaled S, W S^T, S W S^T and S d."""
    m = stencil_size(kind)
    k = strain_dim(kind)
    s = np.zeros(MAX_K)
    ok = eval_strain(kind, pos, rest, params, s, S, True)
    for a in range(k):
        for c in range(3 * m):
            S[a, c] *= scale[a]
            WSt[c, a] = w[c // 3] * S[a, c]
    for a in range(k):
        acc = 0.0
        for c in range(3 * m):
            if w[c // 3] > 0.0:
                acc += S[a, c] * d[c // 3, c % 3]
        Sd[a] = acc
        for b in range(k):
            acc = 0.0
            for c in range(3 * m):
                acc += S[a, c] * WSt[c, b]
            A[a, b] = acc
    return ok


@njit(cache=True)
def _displace(pos, WSt, dlam, m, k, xh):
    for v in range(m):
        for i in range(3):
            acc = 0.0
            for a in range(k):
                acc += WSt[3 * v + i, a] * dlam[a]
            xh[v, i] = pos[v, i] + acc


@njit(cache=True)
def _evaluate(kind, pos, w, d, rest, params, WSt, A, Sd, dlam, weight, want_gh, gout, Hout, work):
    """Objective at ``dlam`` (+inf if inadmissible); with ``want_gh`` also the
    gradient and Gauss-Newton Hessian, with S~ taken at the displaced state."""
    m = stencil_size(kind)
    k = strain_dim(kind)
    xh, s, St, g, H, B, HB = work
    _displace(pos, WSt, dlam, m, k, xh)
    inertia = 0.0
    for v in range(m):
        if w[v] > 0.0:
            for i in range(3):
                r = d[v, i] + xh[v, i] - pos[v, i]
                inertia += r * r / w[v]
    if not eval_strain(kind, xh[:m], rest, params, s, St, want_gh):
        return np.inf
    U = reduced(kind, s, params, g, H)
    if not np.isfinite(U):
        return np.inf
    f = 0.5 * weight * inertia + U
    if not want_gh:
        return f
    # B = S~ W S^T (raw displaced Jacobian against the scaled subspace)
    for a in range(k):
        for b in range(k):
            acc = 0.0
            for c in range(3 * m):
                acc += St[a, c] * WSt[c, b]
            B[a, b] = acc
    for a in range(k):
        acc = weight * Sd[a]
        for b in range(k):
            acc += weight * A[a, b] * dlam[b]
        for c in range(k):
            acc += B[c, a] * g[c]
        gout[a] = acc
    for a in range(k):
        for b in range(k):
            acc = 0.0
            for c in range(k):
                acc += H[a, c] * B[c, b]
            HB[a, b] = acc
    for a in range(k):
        for b in range(a, k):
            acc = 0.5 * weight * (A[a, b] + A[b, a])
            for c in range(k):
                acc += B[c, a] * HB[c, b]
            Hout[a, b] = acc
            Hout[b, a] = acc
    return f


@njit(cache=True)
def _workspace():
    """Scratch arrays for :func:`_evaluate`: (xh, s, St, g, H, B, HB)."""
    return (
        np.zeros((MAX_M, 3)), np.zeros(MAX_K), np.zeros((MAX_K, 3 * MAX_M)), np.zeros(MAX_K),
        np.zeros((MAX_K, MAX_K)), np.zeros((MAX_K, MAX_K)), np.zeros((MAX_K, MAX_K)),
    )


@njit(cache=True)
def local_newton(kind, pos, w, d, rest, params, scale, budget, eps_abs, eps_rel, dlam, dd, trace):
    """Damped Newton on the reduced objective.

    Writes ``dlam`` (k) and ``dd`` (m, 3); ``trace[i]`` holds the objective after
    i accepted steps. Returns (iterations, converged, failed); on failure dlam and
    dd are zero.
    """
    m = stencil_size(kind)
    k = strain_dim(kind)
    S = np.zeros((MAX_K, 3 * MAX_M))
    WSt = np.zeros((3 * MAX_M, MAX_K))
    A = np.zeros((k, k))
    Sd = np.zeros(k)
    for a in range(k):
        dlam[a] = 0.0
    for v in range(m):
        for i in range(3):
            dd[v, i] = 0.0
    if not _setup(kind, pos, w, d, rest, params, scale, S, WSt, A, Sd):
        return 0, False, True
    work = _workspace()
    weight = energy_weight(kind, params)
    g = np.zeros(k)
    H = np.zeros((k, k))
    gt = np.zeros(k)
    Ht = np.zeros((k, k))
    Hp = np.zeros((k, k))
    p = np.zeros(k)
    trial = np.zeros(k)
    f = _evaluate(kind, pos, w, d, rest, params, WSt, A, Sd, dlam, weight, True, g, H, work)
    trace[0] = f
    if not np.isfinite(f):
        return 0, False, True
    # convergence is judged in true units: the solver form is scaled by the
    # compliance, and hard constraints are measured as constraint violation
    gscale = weight
    if gscale <= 0.0:
        gscale = math.sqrt(np.sum(A * A))
        if gscale <= 0.0:
            gscale = 1.0
    g0 = math.sqrt(np.dot(g, g)) / gscale
    if g0 <= eps_abs:
        return 0, True, False
    tol = eps_abs + eps_rel * g0
    iters = 0
    converged = False
    failed = False
    while iters < budget:
        make_psd_kernel(H, k, Hp)
        if not _cholesky_solve(Hp, -g, k, p):
            # semidefinite: directions with W S^T dlam = 0 (pinned vertices) carry no gradient
            tr = 0.0
            for a in range(k):
                tr += abs(Hp[a, a])
            eps = 1e-8 * max(1.0, tr / k)
            for a in range(k):
                Hp[a, a] += eps
            if not _cholesky_solve(Hp, -g, k, p):
                failed = iters == 0
                break
        slope = np.dot(g, p)
        if not slope < 0.0:
            break
        t = 1.0
        accepted = False
        ft = np.inf
        for _ in range(MAX_BACKTRACKS + 1):
            for a in range(k):
                trial[a] = dlam[a] + t * p[a]
            ft = _evaluate(kind, pos, w, d, rest, params, WSt, A, Sd, trial, weight, True, gt, Ht, work)
            if ft <= f + ARMIJO_C1 * t * slope:
                accepted = True
                break
            t *= BACKTRACK
        if not accepted:
            break
        for a in range(k):
            dlam[a] = trial[a]
            g[a] = gt[a]
            for b in range(k):
                H[a, b] = Ht[a, b]
        f = ft
        iters += 1
        trace[iters] = f
        if math.sqrt(np.dot(g, g)) / gscale <= tol:
            converged = True
            break
    if failed:
        for a in range(k):
            dlam[a] = 0.0
        return iters, False, True
    for v in range(m):
        for i in range(3):
            acc = 0.0
            for a in range(k):
                acc += WSt[3 * v + i, a] * dlam[a]
            dd[v, i] = acc
    return iters, converged, False


# ---------------------------------------------------------------------------
# Python-facing API


@dataclass
class LocalProblem:
    term: ForceTerm
    x: np.ndarray  # (m, 3) stencil positions
    d: np.ndarray  # (m, 3) this term's accumulated displacement
    w: np.ndarray  # (m,) W = dt^2 / mass per stencil vertex, 0 when pinned
    newton_budget: int = 20
    eps_abs: float = EPS_ABS
    eps_rel: float = EPS_REL

    def __post_init__(self):
        m = self.term.m
        self.x = np.ascontiguousarray(np.asarray(self.x, dtype=np.float64).reshape(m, 3))
        self.d = np.ascontiguousarray(np.asarray(self.d, dtype=np.float64).reshape(m, 3))
        self.w = np.ascontiguousarray(np.asarray(self.w, dtype=np.float64).reshape(m))
        if np.any(self.w < 0):
            raise ValueError("W entries must be non-negative")

    @classmethod
    def from_state(cls, term: ForceTerm, x, d, inv_mass, dt, **kw):
        """Build from full positions (n, 3), this term's (m, 3) displacement and inverse masses."""
        x = np.asarray(x).reshape(-1, 3)
        w = dt * dt * np.asarray(inv_mass)[term.stencil]
        return cls(term, x[term.stencil], d, w, **kw)

    def _fixed(self):
        t = self.term
        S = np.zeros((MAX_K, 3 * MAX_M))
        WSt = np.zeros((3 * MAX_M, MAX_K))
        A = np.zeros((t.k, t.k))
        Sd = np.zeros(t.k)
        _setup(t.kind, self.x, self.w, self.d, t.rest, t.params, t.terms.scale[t.index], S, WSt, A, Sd)
        return S[: t.k, : 3 * t.m], WSt, A, Sd

    @property
    def subspace(self):
        """W S^T, shape (3m, k)."""
        t = self.term
        return self._fixed()[1][: 3 * t.m, : t.k].copy()


@dataclass
class LocalSolution:
    dlam: np.ndarray
    dd: np.ndarray  # (m, 3)
    iterations: int
    converged: bool
    failed: bool
    decrease: float
    trace: np.ndarray = field(repr=False)


def _unweight(prob, value):
    w = prob.term.weight
    return value / w if w > 0 else value


def objective(prob: LocalProblem, dlam) -> float:
    """Reduced objective at ``dlam``; +inf outside the energy's domain.

    For hard constraints (zero compliance) the value is half the squared
    constraint violation.
    """
    t = prob.term
    dlam = np.ascontiguousarray(np.asarray(dlam, dtype=np.float64).reshape(t.k))
    _, WSt, A, Sd = prob._fixed()
    g = np.zeros(t.k)
    H = np.zeros((t.k, t.k))
    f = _evaluate(t.kind, prob.x, prob.w, prob.d, t.rest, t.params, WSt, A, Sd, dlam, t.weight, False, g, H, _workspace())
    return _unweight(prob, f)


def objective_grad_hess(prob: LocalProblem, dlam):
    """(gradient, Gauss-Newton Hessian) of :func:`objective` with respect to dlam."""
    t = prob.term
    dlam = np.ascontiguousarray(np.asarray(dlam, dtype=np.float64).reshape(t.k))
    _, WSt, A, Sd = prob._fixed()
    g = np.zeros(t.k)
    H = np.zeros((t.k, t.k))
    f = _evaluate(t.kind, prob.x, prob.w, prob.d, t.rest, t.params, WSt, A, Sd, dlam, t.weight, True, g, H, _workspace())
    if not np.isfinite(f):
        raise EnergyDomainError("displaced state outside the energy's domain")
    return _unweight(prob, g), _unweight(prob, H)


def make_psd(H):
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.all(np.isfinite(H)):
        raise ValueError("non-finite Hessian")
    out = np.empty_like(H)
    make_psd_kernel(np.ascontiguousarray(H), H.shape[0], out)
    return out


def solve_local(prob: LocalProblem) -> LocalSolution:
    t = prob.term
    dlam = np.zeros(t.k)
    dd = np.zeros((t.m, 3))
    trace = np.full(prob.newton_budget + 1, np.nan)
    iters, converged, failed = local_newton(
        t.kind, prob.x, prob.w, prob.d, t.rest, t.params, t.terms.scale[t.index],
        prob.newton_budget, prob.eps_abs, prob.eps_rel, dlam, dd, trace,
    )
    trace = trace[: iters + 1]
    trace = np.array([_unweight(prob, v) for v in trace])
    decrease = float(trace[0] - trace[-1]) if len(trace) and np.isfinite(trace[0]) else 0.0
    return LocalSolution(dlam, dd, int(iters), bool(converged), bool(failed), decrease, trace)
