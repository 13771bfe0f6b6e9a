"""Energy terms U(x) = U_hat(s(x)) over low-dimensional strains.

Every term is stored in a flat :class:`TermSet` (structure of arrays) so the
solver kernels can loop over heterogeneous terms without Python dispatch. The
per-kind math lives in the ``@njit`` kernels below; :class:`ForceTerm` is a
convenience view of one term for inspection and tests.

Parameter layout per kind (``params`` row, ``rest`` row):

=========  ============================  ==========================
kind       params                        rest
=========  ============================  ==========================
DISTANCE   rest length, compliance       unused
PIN        target x, y, z, compliance    unused
TET_NH     volume, mu, lambda            D_m^-1 (3x3, row-major)
TET_SNH    volume, mu, lambda            D_m^-1 (3x3, row-major)
MEMBRANE   area, stretch stiffness       D_m^-1 (2x2, row-major)
HINGE      rest angle, bend stiffness    unused
=========  ============================  ==========================

Compliant kinds (DISTANCE, PIN) hand the solver their energy multiplied by the
compliance, i.e. ``s^2 / 2``; the solver multiplies its inertial term by the
same weight, which keeps zero compliance (hard constraints) well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .mesh import TetMesh, TriMesh, compute_rest_state

DISTANCE, PIN, TET_NH, TET_SNH, MEMBRANE, HINGE = range(6)
KIND_NAMES = ("distance", "pin", "tet_nh", "tet_snh", "membrane", "hinge")
MAX_K = 6
MAX_M = 4

_STENCIL_SIZE = np.array([2, 1, 4, 4, 3, 4], dtype=np.int64)
_STRAIN_DIM = np.array([1, 3, 6, 6, 3, 1], dtype=np.int64)

# Green-strain components: tets (xx, yy, zz, xy, xz, yz), triangles (xx, xy, yy).
_TET_P = np.array([0, 1, 2, 0, 0, 1], dtype=np.int64)
_TET_Q = np.array([0, 1, 2, 1, 2, 2], dtype=np.int64)
_TRI_P = np.array([0, 0, 1], dtype=np.int64)
_TRI_Q = np.array([0, 1, 1], dtype=np.int64)


class EnergyDomainError(ValueError):
    """Energy evaluated outside its admissible domain (e.g. inverted log-barrier tet)."""


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def stencil_size(kind):
    return _STENCIL_SIZE[kind]


@njit(cache=True)
def strain_dim(kind):
    return _STRAIN_DIM[kind]


@njit(cache=True)
def energy_weight(kind, params):
    if kind == DISTANCE:
        return params[1]
    if kind == PIN:
        return params[3]
    return 1.0


@njit(cache=True)
def _green_strain(kind, pos, rest, s, S, want_jac):
    """Green strain of a tet/triangle and its Jacobian. Returns det F (tets) or 1."""
    nd = 3 if (kind == TET_NH or kind == TET_SNH) else 2
    m = nd + 1
    F = np.zeros((3, nd))
    G = np.zeros((m, nd))
    for j in range(nd):
        acc = 0.0
        for a in range(nd):
            dmi = rest[a * nd + j]
            G[a + 1, j] = dmi
            acc += dmi
            for i in range(3):
                F[i, j] += (pos[a + 1, i] - pos[0, i]) * dmi
        G[0, j] = -acc
    if nd == 3:
        P = _TET_P
        Q = _TET_Q
    else:
        P = _TRI_P
        Q = _TRI_Q
    k = P.shape[0]
    for a in range(k):
        p = P[a]
        q = Q[a]
        acc = 0.0
        for i in range(3):
            acc += F[i, p] * F[i, q]
        if p == q:
            acc -= 1.0
        s[a] = 0.5 * acc
        if want_jac:
            for v in range(m):
                for i in range(3):
                    S[a, 3 * v + i] = 0.5 * (G[v, p] * F[i, q] + F[i, p] * G[v, q])
    if nd == 3:
        return (
            F[0, 0] * (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1])
            - F[0, 1] * (F[1, 0] * F[2, 2] - F[1, 2] * F[2, 0])
            + F[0, 2] * (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0])
        )
    return 1.0


@njit(cache=True)
def _cross(a, b):
    return np.array(
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    )


@njit(cache=True)
def _dihedral(pos, grad, want_grad):
    """Signed dihedral angle of hinge (e0, e1, v_left, v_right); nan if degenerate."""
    x0 = pos[0]
    x1 = pos[1]
    xl = pos[2]
    xr = pos[3]
    e = x1 - x0
    n1 = _cross(e, xl - x0)
    n2 = _cross(xr - x0, e)
    el2 = np.dot(e, e)
    n1sq = np.dot(n1, n1)
    n2sq = np.dot(n2, n2)
    if el2 <= 1e-300 or n1sq <= 1e-300 or n2sq <= 1e-300:
        return np.nan
    el = math.sqrt(el2)
    theta = math.atan2(np.dot(_cross(n1, n2), e) / el, np.dot(n1, n2))
    if want_grad:
        gl = -el / n1sq * n1
        gr = -el / n2sq * n2
        a0 = np.dot(x1 - xl, e) / el2
        b0 = np.dot(x1 - xr, e) / el2
        a1 = np.dot(xl - x0, e) / el2
        b1 = np.dot(xr - x0, e) / el2
        for i in range(3):
            grad[i] = -a0 * gl[i] - b0 * gr[i]
            grad[3 + i] = -a1 * gl[i] - b1 * gr[i]
            grad[6 + i] = gl[i]
            grad[9 + i] = gr[i]
    return theta


@njit(cache=True)
def _wrap_angle(a):
    while a > math.pi:
        a -= 2.0 * math.pi
    while a <= -math.pi:
        a += 2.0 * math.pi
    return a


@njit(cache=True)
def eval_strain(kind, pos, rest, params, s, S, want_jac):
    """Raw (unscaled) strain into ``s[:k]`` and Jacobian into ``S[:k, :3m]``.

    Returns False when the configuration is outside the energy's domain.
    """
    if want_jac:
        S[:, :] = 0.0
    if kind == DISTANCE:
        d0 = pos[1, 0] - pos[0, 0]
        d1 = pos[1, 1] - pos[0, 1]
        d2 = pos[1, 2] - pos[0, 2]
        L = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        s[0] = L - params[0]
        if L <= 1e-300:
            return False
        if want_jac:
            S[0, 0] = -d0 / L
            S[0, 1] = -d1 / L
            S[0, 2] = -d2 / L
            S[0, 3] = d0 / L
            S[0, 4] = d1 / L
            S[0, 5] = d2 / L
        return True
    if kind == PIN:
        for i in range(3):
            s[i] = pos[0, i] - params[i]
            if want_jac:
                S[i, i] = 1.0
        return True
    if kind == TET_NH or kind == TET_SNH:
        det = _green_strain(kind, pos, rest, s, S, want_jac)
        return det > 0.0
    if kind == MEMBRANE:
        _green_strain(kind, pos, rest, s, S, want_jac)
        return True
    if kind == HINGE:
        grad = np.zeros(12)
        theta = _dihedral(pos, grad, want_jac)
        if np.isnan(theta):
            s[0] = 0.0
            return False
        s[0] = _wrap_angle(theta - params[0])
        if want_jac:
            for c in range(12):
                S[0, c] = grad[c]
        return True
    return False


@njit(cache=True)
def _nh_reduced(stable, s, params, g, H):
    V = params[0]
    mu = params[1]
    lam = params[2]
    c00 = 1.0 + 2.0 * s[0]
    c11 = 1.0 + 2.0 * s[1]
    c22 = 1.0 + 2.0 * s[2]
    c01 = 2.0 * s[3]
    c02 = 2.0 * s[4]
    c12 = 2.0 * s[5]
    # cofactors of the symmetric C = I + 2E
    k00 = c11 * c22 - c12 * c12
    k01 = c02 * c12 - c01 * c22
    k02 = c01 * c12 - c02 * c11
    detC = c00 * k00 + c01 * k01 + c02 * k02
    if not detC > 0.0:
        return np.inf
    Ci = np.empty((3, 3))
    Ci[0, 0] = k00 / detC
    Ci[0, 1] = Ci[1, 0] = k01 / detC
    Ci[0, 2] = Ci[2, 0] = k02 / detC
    Ci[1, 1] = (c00 * c22 - c02 * c02) / detC
    Ci[1, 2] = Ci[2, 1] = (c01 * c02 - c00 * c12) / detC
    Ci[2, 2] = (c00 * c11 - c01 * c01) / detC
    trC = c00 + c11 + c22
    J = math.sqrt(detC)
    logJ = 0.5 * math.log(detC)
    if stable:
        U = V * (0.5 * mu * (trC - 3.0) - mu * (J - 1.0) + 0.5 * lam * (J - 1.0) ** 2)
        coef = (lam * (J - 1.0) - mu) * J
        tt = V * (lam * (2.0 * J - 1.0) - mu) * J
    else:
        U = V * (0.5 * mu * (trC - 3.0) - mu * logJ + 0.5 * lam * logJ * logJ)
        coef = lam * logJ - mu
        tt = V * lam
    # dU/dE = V (mu I + coef C^-1)
    t = np.empty(6)
    for a in range(6):
        p = _TET_P[a]
        q = _TET_Q[a]
        if p == q:
            g[a] = V * (mu + coef * Ci[p, p])
            t[a] = Ci[p, p]
        else:
            g[a] = 2.0 * V * coef * Ci[p, q]
            t[a] = 2.0 * Ci[p, q]
    for a in range(6):
        p = _TET_P[a]
        q = _TET_Q[a]
        for b in range(a, 6):
            r = _TET_P[b]
            w = _TET_Q[b]
            # tr(C^-1 B_a C^-1 B_b) with B = e_p e_q^T (+ transpose off-diagonal)
            T = Ci[w, p] * Ci[q, r]
            if r != w:
                T += Ci[r, p] * Ci[q, w]
            if p != q:
                T += Ci[w, q] * Ci[p, r]
                if r != w:
                    T += Ci[r, q] * Ci[p, w]
            h = tt * t[a] * t[b] - 2.0 * V * coef * T
            H[a, b] = h
            H[b, a] = h
    return U


@njit(cache=True)
def reduced(kind, s, params, g, H):
    """Solver-form reduced energy, gradient and Hessian at raw strain ``s``.

    Compliant kinds are returned multiplied by their compliance.
    """
    k = _STRAIN_DIM[kind]
    for a in range(k):
        g[a] = 0.0
        for b in range(k):
            H[a, b] = 0.0
    if kind == DISTANCE:
        g[0] = s[0]
        H[0, 0] = 1.0
        return 0.5 * s[0] * s[0]
    if kind == PIN:
        U = 0.0
        for i in range(3):
            g[i] = s[i]
            H[i, i] = 1.0
            U += 0.5 * s[i] * s[i]
        return U
    if kind == TET_NH:
        return _nh_reduced(False, s, params, g, H)
    if kind == TET_SNH:
        return _nh_reduced(True, s, params, g, H)
    if kind == MEMBRANE:
        c = params[0] * params[1]
        g[0] = c * s[0]
        g[1] = 2.0 * c * s[1]
        g[2] = c * s[2]
        H[0, 0] = c
        H[1, 1] = 2.0 * c
        H[2, 2] = c
        return 0.5 * c * (s[0] * s[0] + s[2] * s[2] + 2.0 * s[1] * s[1])
    if kind == HINGE:
        g[0] = params[1] * s[0]
        H[0, 0] = params[1]
        return 0.5 * params[1] * s[0] * s[0]
    return np.inf


@njit(cache=True)
def term_energy(kind, pos, rest, params):
    """True energy of one term (compliant kinds divided by compliance; hard constraints report 0)."""
    s = np.zeros(MAX_K)
    S = np.zeros((MAX_K, 3 * MAX_M))
    g = np.zeros(MAX_K)
    H = np.zeros((MAX_K, MAX_K))
    ok = eval_strain(kind, pos, rest, params, s, S, False)
    if not ok and kind != DISTANCE:
        return np.inf
    U = reduced(kind, s, params, g, H)
    w = energy_weight(kind, params)
    if w == 0.0:
        return 0.0
    return U / w


@njit(cache=True)
def total_energy_kernel(kind, stencil, rest, params, x):
    total = 0.0
    pos = np.zeros((MAX_M, 3))
    for t in range(kind.shape[0]):
        m = _STENCIL_SIZE[kind[t]]
        for v in range(m):
            pos[v, :] = x[stencil[t, v]]
        total += term_energy(kind[t], pos[:m], rest[t], params[t])
    return total


# ---------------------------------------------------------------------------
# term storage


@dataclass
class TermSet:
    kind: np.ndarray  # (n,) int64
    stencil: np.ndarray  # (n, 4) int64, padded with -1
    rest: np.ndarray  # (n, 9)
    params: np.ndarray  # (n, 4)
    scale: np.ndarray  # (n, 6) strain scale, 1 where unused

    def __len__(self):
        return len(self.kind)

    def __getitem__(self, i) -> "ForceTerm":
        return ForceTerm(self, int(i))

    @property
    def sizes(self):
        return _STENCIL_SIZE[self.kind]

    @property
    def dims(self):
        return _STRAIN_DIM[self.kind]

    def stencils(self):
        return [self.stencil[i, : _STENCIL_SIZE[self.kind[i]]] for i in range(len(self))]

    @classmethod
    def empty(cls):
        return cls(
            np.zeros(0, np.int64),
            np.zeros((0, 4), np.int64),
            np.zeros((0, 9)),
            np.zeros((0, 4)),
            np.zeros((0, 6)),
        )

    @classmethod
    def concat(cls, *parts):
        parts = [p for p in parts if p is not None and len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.ascontiguousarray(np.concatenate([getattr(p, f) for p in parts])) for f in
                     ("kind", "stencil", "rest", "params", "scale")))

    def select(self, mask):
        return TermSet(self.kind[mask], self.stencil[mask], self.rest[mask], self.params[mask], self.scale[mask])

    def energy(self, x) -> float:
        if len(self) == 0:
            return 0.0
        return float(total_energy_kernel(self.kind, self.stencil, self.rest, self.params, np.ascontiguousarray(x)))


def _make(kind, stencil, rest=None, params=None, scale=None):
    n = len(stencil)
    st = np.full((n, 4), -1, dtype=np.int64)
    stencil = np.asarray(stencil, dtype=np.int64).reshape(n, -1)
    st[:, : stencil.shape[1]] = stencil
    r = np.zeros((n, 9))
    if rest is not None:
        rest = np.asarray(rest, dtype=np.float64).reshape(n, -1)
        r[:, : rest.shape[1]] = rest
    p = np.zeros((n, 4))
    if params is not None:
        params = np.asarray(params, dtype=np.float64).reshape(n, -1)
        p[:, : params.shape[1]] = params
    sc = np.ones((n, 6))
    if scale is not None:
        scale = np.asarray(scale, dtype=np.float64).reshape(n, -1)
        sc[:, : scale.shape[1]] = scale
    return TermSet(np.full(n, kind, dtype=np.int64), st, r, p, sc)


def distance_terms(pairs, rest_lengths, compliance) -> TermSet:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = len(pairs)
    alpha = np.broadcast_to(np.asarray(compliance, dtype=np.float64), (n,))
    if np.any(alpha < 0):
        raise ValueError("compliance must be non-negative")
    return _make(DISTANCE, pairs, params=np.stack([np.broadcast_to(rest_lengths, (n,)), alpha], axis=1))


def spring_terms(vertices, edges, compliance) -> TermSet:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rest = np.linalg.norm(vertices[edges[:, 1]] - vertices[edges[:, 0]], axis=1)
    return distance_terms(edges, rest, compliance)


def pin_terms(vertices, targets, compliance) -> TermSet:
    vertices = np.asarray(vertices, dtype=np.int64).reshape(-1, 1)
    n = len(vertices)
    targets = np.asarray(targets, dtype=np.float64).reshape(n, 3)
    alpha = np.broadcast_to(np.asarray(compliance, dtype=np.float64), (n, 1))
    return _make(PIN, vertices, params=np.concatenate([targets, alpha], axis=1))


@dataclass
class NeoHookeanParams:
    mu: float
    lam: float
    variant: str = "log"  # "log" (inversion barrier) or "stable"

    def __post_init__(self):
        if not self.mu > 0 or self.lam < 0:
            raise ValueError("need mu > 0 and lambda >= 0")
        if self.variant not in ("log", "stable"):
            raise ValueError(f"unknown neo-Hookean variant {self.variant!r}")

    @classmethod
    def from_young(cls, youngs_modulus, poisson_ratio, variant="log"):
        mu, lam = lame_parameters(youngs_modulus, poisson_ratio)
        return cls(mu, lam, variant)


def lame_parameters(youngs_modulus, poisson_ratio):
    """(mu, lambda) from Young's modulus and Poisson's ratio."""
    E, nu = float(youngs_modulus), float(poisson_ratio)
    if not (-1.0 < nu < 0.5):
        raise ValueError(f"Poisson ratio {nu} outside (-1, 0.5)")
    return E / (2.0 * (1.0 + nu)), E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))


@dataclass
class ClothParams:
    stretch_stiffness: float  # N/m
    bending_stiffness: float  # N m
    bending_scale: float | None = None  # default: mean rest edge length squared

    def __post_init__(self):
        if not self.stretch_stiffness > 0 or self.bending_stiffness < 0:
            raise ValueError("need stretch stiffness > 0 and bending stiffness >= 0")


def tet_terms(mesh: TetMesh, params: NeoHookeanParams, rest_vertices=None) -> TermSet:
    rest_mesh = mesh if rest_vertices is None else TetMesh(rest_vertices, mesh.tets)
    rs = compute_rest_state(rest_mesh)
    n = len(mesh.tets)
    kind = TET_NH if params.variant == "log" else TET_SNH
    p = np.stack([rs.tet_volume, np.full(n, params.mu), np.full(n, params.lam)], axis=1)
    return _make(kind, mesh.tets, rest=rs.tet_dm_inv.reshape(n, 9), params=p)


def membrane_terms(mesh: TriMesh, stretch_stiffness) -> TermSet:
    rs = compute_rest_state(mesh)
    n = len(mesh.triangles)
    p = np.stack([rs.tri_area, np.full(n, float(stretch_stiffness))], axis=1)
    return _make(MEMBRANE, mesh.triangles, rest=rs.tri_dm_inv.reshape(n, 4), params=p)


def hinge_terms(mesh: TriMesh, bending_stiffness, bending_scale=None) -> TermSet:
    if len(mesh.hinges) == 0:
        return TermSet.empty()
    rs = compute_rest_state(mesh)
    if bending_scale is None:
        bending_scale = float(np.mean(rs.edge_length)) ** 2
    n = len(mesh.hinges)
    p = np.stack([rs.hinge_angle, np.full(n, float(bending_stiffness))], axis=1)
    return _make(HINGE, mesh.hinges, params=p, scale=np.full((n, 1), bending_scale))


def cloth_terms(mesh: TriMesh, params: ClothParams) -> TermSet:
    return TermSet.concat(
        membrane_terms(mesh, params.stretch_stiffness),
        hinge_terms(mesh, params.bending_stiffness, params.bending_scale) if params.bending_stiffness > 0 else None,
    )


# ---------------------------------------------------------------------------
# single-term view and functional API


class ForceTerm:
    """View of term ``index`` in a TermSet; positions are full (n, 3) arrays."""

    def __init__(self, terms: TermSet, index: int):
        self.terms = terms
        self.index = index
        self.kind = int(terms.kind[index])
        self.m = int(_STENCIL_SIZE[self.kind])
        self.k = int(_STRAIN_DIM[self.kind])
        self.stencil = terms.stencil[index, : self.m]
        self.rest = terms.rest[index]
        self.params = terms.params[index]
        self.strain_scale = terms.scale[index, : self.k]

    def __repr__(self):
        return f"ForceTerm({KIND_NAMES[self.kind]}, stencil={self.stencil.tolist()})"

    @property
    def weight(self):
        return float(energy_weight(self.kind, self.params))

    def _positions(self, x, local=False):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        if local:
            if len(x) != self.m:
                raise ValueError(f"expected {self.m} stencil positions, got {len(x)}")
            return np.ascontiguousarray(x)
        return np.ascontiguousarray(x[self.stencil])

    def raw_strain(self, x, jacobian=False, local=False):
        s = np.zeros(MAX_K)
        S = np.zeros((MAX_K, 3 * MAX_M))
        ok = eval_strain(self.kind, self._positions(x, local), self.rest, self.params, s, S, jacobian)
        return s[: self.k].copy(), S[: self.k, : 3 * self.m].copy(), ok

    def strain(self, x, local=False):
        """Scaled strain vector."""
        return self.raw_strain(x, local=local)[0] * self.strain_scale

    def jacobian(self, x, local=False):
        """Scaled strain Jacobian, shape (k, 3m)."""
        _, S, _ = self.raw_strain(x, jacobian=True, local=local)
        return S * self.strain_scale[:, None]

    def reduced(self, s_scaled):
        """True (U, grad, hess) of the reduced energy with respect to the scaled strain."""
        s_scaled = np.asarray(s_scaled, dtype=np.float64).reshape(self.k)
        raw = np.zeros(MAX_K)
        raw[: self.k] = s_scaled / self.strain_scale
        g = np.zeros(MAX_K)
        H = np.zeros((MAX_K, MAX_K))
        U = reduced(self.kind, raw, self.params, g, H)
        if not np.isfinite(U):
            raise EnergyDomainError(f"{self!r}: strain outside the admissible domain")
        w = self.weight
        if w == 0.0:
            if np.any(raw[: self.k] != 0.0):
                raise EnergyDomainError(f"{self!r}: hard constraint violated")
            return 0.0, np.zeros(self.k), np.zeros((self.k, self.k))
        tau = self.strain_scale
        return U / w, g[: self.k] / tau / w, H[: self.k, : self.k] / np.outer(tau, tau) / w

    def energy(self, x, local=False):
        s, _, ok = self.raw_strain(x, local=local)
        if not ok and self.kind != DISTANCE:
            raise EnergyDomainError(f"{self!r}: configuration outside the admissible domain")
        return self.reduced(s * self.strain_scale)[0]

    def gradient(self, x, local=False):
        """dU/dx on the stencil, shape (m, 3)."""
        s, S, ok = self.raw_strain(x, jacobian=True, local=local)
        if not ok:
            raise EnergyDomainError(f"{self!r}: configuration outside the admissible domain")
        tau = self.strain_scale
        _, g, _ = self.reduced(s * tau)
        return ((S * tau[:, None]).T @ g).reshape(self.m, 3)

    def force(self, x, local=False):
        return -self.gradient(x, local)


def eval_deformation_gradient(term: ForceTerm, x, local=False):
    """F = D_s D_m^-1: 3x3 for tets, 3x2 (rest-frame to world) for triangles."""
    if term.kind in (TET_NH, TET_SNH):
        nd = 3
    elif term.kind == MEMBRANE:
        nd = 2
    else:
        raise TypeError(f"{term!r} has no deformation gradient")
    p = term._positions(x, local)
    ds = (p[1:] - p[0]).T
    return ds @ term.rest[: nd * nd].reshape(nd, nd)


def nh_energy(F, volume, params: NeoHookeanParams):
    """Neo-Hookean energy of one tet from its deformation gradient."""
    F = np.asarray(F, dtype=np.float64)
    J = np.linalg.det(F)
    mu, lam = params.mu, params.lam
    base = 0.5 * mu * (np.sum(F * F) - 3.0)
    if params.variant == "log":
        if J <= 0:
            raise EnergyDomainError("log-barrier neo-Hookean needs det F > 0")
        logJ = np.log(J)
        return volume * (base - mu * logJ + 0.5 * lam * logJ**2)
    return volume * (base - mu * (J - 1.0) + 0.5 * lam * (J - 1.0) ** 2)


def green_strain_vector(F):
    """(xx, yy, zz, xy, xz, yz) for 3x3 F; (xx, xy, yy) for 3x2 F."""
    F = np.asarray(F, dtype=np.float64)
    E = 0.5 * (F.T @ F - np.eye(F.shape[1]))
    if F.shape[1] == 3:
        return E[_TET_P, _TET_Q]
    return E[_TRI_P, _TRI_Q]


def strain_jacobian(term: ForceTerm, x, local=False):
    return term.jacobian(x, local)


def reduced_energy_derivatives(term: ForceTerm, s):
    return term.reduced(s)


def dihedral_angle(positions):
    """Signed angle between the faces of a hinge (e0, e1, v_left, v_right), in (-pi, pi].

    Zero when flat; positive when the face normals open away from each other.
    """
    p = np.ascontiguousarray(np.asarray(positions, dtype=np.float64).reshape(4, 3))
    theta = _dihedral(p, np.zeros(12), False)
    if np.isnan(theta):
        raise ValueError("degenerate hinge triangle")
    return float(theta)
