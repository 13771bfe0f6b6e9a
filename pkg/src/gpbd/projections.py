"""Hard projections run alongside the GPBD sweeps.

Pins, signed-distance obstacles, a two-way coupled rigid sphere, and the
inversion recovery applied to tets before their local solve. Each projection
only moves positions; the engine books the displacement into the predicted
state so that x = x_tilde + sum(d) keeps holding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# inversion recovery


@njit(cache=True)
def fix_inversion_kernel(pos, dm_inv, mass, eps, out):
    """Un-invert one tet; returns True if the positions changed.

    The signed SVD F = U diag(s) V^T carries the sign on the smallest singular
    value; it is negated (and singular values below ``eps`` are lifted to
    ``eps``), F' is rebuilt, and the vertices are placed to realize F' with the
    mass-weighted centroid unchanged.
    """
    Dmi = np.empty((3, 3))
    for a in range(3):
        for b in range(3):
            Dmi[a, b] = dm_inv[3 * a + b]
    Ds = np.empty((3, 3))
    for i in range(3):
        for a in range(3):
            Ds[i, a] = pos[a + 1, i] - pos[0, i]
    F = Ds @ Dmi
    for v in range(4):
        for i in range(3):
            out[v, i] = pos[v, i]
    if np.linalg.det(F) > 0.0:
        return False
    U, sig, Vt = np.linalg.svd(F)
    if np.linalg.det(U) < 0.0:
        U[:, 2] *= -1.0
        sig[2] *= -1.0
    if np.linalg.det(Vt) < 0.0:
        Vt[2, :] *= -1.0
        sig[2] *= -1.0
    sig[2] = abs(sig[2])
    for a in range(3):
        sig[a] = max(sig[a], eps)
    Fn = U @ np.diag(sig) @ Vt
    Dsn = Fn @ np.linalg.inv(Dmi)
    new = np.zeros((4, 3))
    for a in range(3):
        for i in range(3):
            new[a + 1, i] = Dsn[i, a]
    mt = 0.0
    c_old = np.zeros(3)
    c_new = np.zeros(3)
    for v in range(4):
        mt += mass[v]
        for i in range(3):
            c_old[i] += mass[v] * pos[v, i]
            c_new[i] += mass[v] * new[v, i]
    for v in range(4):
        for i in range(3):
            out[v, i] = new[v, i] + (c_old[i] - c_new[i]) / mt
    return True


def fix_inversion(positions, dm_inv, masses=None, eps=1e-8):
    """Return un-inverted copies of the 4 tet vertex positions (no-op when det F > 0)."""
    pos = np.ascontiguousarray(np.asarray(positions, dtype=np.float64).reshape(4, 3))
    masses = np.ones(4) if masses is None else np.asarray(masses, dtype=np.float64)
    out = np.empty((4, 3))
    fix_inversion_kernel(pos, np.ascontiguousarray(np.asarray(dm_inv, dtype=np.float64).ravel()), masses, eps, out)
    return out


# ---------------------------------------------------------------------------
# pins


class PinMotion:
    """Offset applied to pinned rest positions as a function of time."""

    def targets(self, rest, t):
        return rest


@dataclass
class Keyframes(PinMotion):
    times: np.ndarray
    offsets: np.ndarray  # (k, 3), linearly interpolated, held outside the range

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)

    def offset(self, t):
        return np.array([np.interp(t, self.times, self.offsets[:, i]) for i in range(3)])

    def targets(self, rest, t):
        return rest + self.offset(t)


@dataclass
class Rotation(PinMotion):
    axis: np.ndarray
    center: np.ndarray
    angle: float  # total angle reached at ``duration``
    duration: float

    def targets(self, rest, t):
        theta = self.angle * min(max(t / self.duration, 0.0), 1.0) if self.duration > 0 else self.angle
        a = np.asarray(self.axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
        R = np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * K @ K
        c = np.asarray(self.center, dtype=np.float64)
        return (rest - c) @ R.T + c


@dataclass
class PinSet:
    vertices: np.ndarray
    rest: np.ndarray  # (p, 3) positions at t = 0
    motion: PinMotion = field(default_factory=PinMotion)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int64).ravel()
        self.rest = np.asarray(self.rest, dtype=np.float64).reshape(-1, 3)

    def targets(self, t):
        return self.motion.targets(self.rest, t)


def project_pins(x, pins: PinSet, t=0.0):
    """Set pinned vertices exactly to their targets at time ``t`` (in place)."""
    x[pins.vertices] = pins.targets(t)
    return x


# ---------------------------------------------------------------------------
# signed distance colliders


@dataclass
class PlaneCollider:
    point: np.ndarray
    normal: np.ndarray
    friction: float = 0.0

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)

    def sdf(self, p):
        p = np.atleast_2d(p)
        return (p - self.point) @ self.normal, np.broadcast_to(self.normal, p.shape).copy()


@dataclass
class SphereCollider:
    center: np.ndarray
    radius: float
    friction: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def sdf(self, p):
        p = np.atleast_2d(p)
        r = p - self.center
        dist = np.linalg.norm(r, axis=1)
        grad = np.zeros_like(r)
        nz = dist > 0
        grad[nz] = r[nz] / dist[nz, None]
        return dist - self.radius, grad


@dataclass
class GridSDF:
    """Trilinearly interpolated signed distance samples; +inf outside the grid."""

    values: np.ndarray  # (nx, ny, nz)
    origin: np.ndarray
    spacing: float
    friction: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("grid SDF needs at least 2 samples per axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid SDF values must be finite")

    def sdf(self, p):
        p = np.atleast_2d(p)
        u = (p - self.origin) / self.spacing
        dims = np.array(self.values.shape)
        inside = np.all((u >= 0) & (u <= dims - 1), axis=1)
        i0 = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
        f = u - i0
        phi = np.full(len(p), np.inf)
        grad = np.zeros_like(p)
        V = self.values
        for q in np.nonzero(inside)[0]:
            i, j, k = i0[q]
            fx, fy, fz = f[q]
            c = V[i : i + 2, j : j + 2, k : k + 2]
            wx = np.array([1 - fx, fx])
            wy = np.array([1 - fy, fy])
            wz = np.array([1 - fz, fz])
            d = np.array([-1.0, 1.0])
            phi[q] = np.einsum("ijk,i,j,k->", c, wx, wy, wz)
            grad[q] = [
                np.einsum("ijk,i,j,k->", c, d, wy, wz),
                np.einsum("ijk,i,j,k->", c, wx, d, wz),
                np.einsum("ijk,i,j,k->", c, wx, wy, d),
            ]
        return phi, grad / self.spacing


def load_grid_sdf(source) -> GridSDF:
    """Parse the plain-text grid format (see README)."""
    from .mesh import _read_text

    dims = origin = spacing = None
    values = []
    for lineno, raw in enumerate(_read_text(source).splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "dims":
                dims = tuple(int(t) for t in tok[1:4])
            elif tok[0] == "origin":
                origin = [float(t) for t in tok[1:4]]
            elif tok[0] == "spacing":
                spacing = float(tok[1])
            else:
                values.extend(float(t) for t in tok)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}") from exc
    if dims is None or origin is None or spacing is None:
        raise ValueError("grid SDF header needs dims, origin and spacing")
    if len(values) != dims[0] * dims[1] * dims[2]:
        raise ValueError(f"expected {dims[0] * dims[1] * dims[2]} values, got {len(values)}")
    return GridSDF(np.array(values).reshape(dims), np.array(origin), spacing)


def write_grid_sdf(path, grid: GridSDF):
    nx, ny, nz = grid.values.shape
    with open(path, "w") as fh:
        fh.write(f"dims {nx} {ny} {nz}\n")
        fh.write("origin {:.17g} {:.17g} {:.17g}\n".format(*grid.origin))
        fh.write(f"spacing {grid.spacing:.17g}\n")
        for row in grid.values.reshape(-1, nz):
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def project_sdf(x, collider, movable=None, max_iter=8):
    """Push penetrating vertices (phi < 0) onto the zero level set, in place.

    ``movable`` masks vertices that may move (pinned ones should not). Returns
    the number of vertices projected.
    """
    idx = np.arange(len(x)) if movable is None else np.nonzero(movable)[0]
    phi, grad = collider.sdf(x[idx])
    hit = phi < 0
    count = 0
    for q in np.nonzero(hit)[0]:
        v = idx[q]
        p = x[v].copy()
        ph, g = phi[q], grad[q]
        for _ in range(max_iter):
            gn2 = g @ g
            if gn2 == 0.0:
                log.warning("zero SDF gradient at penetrating vertex %d; skipped", v)
                p = x[v]
                break
            p = p - ph * g / gn2
            ph_new, g_new = collider.sdf(p)
            ph, g = ph_new[0], g_new[0]
            if ph >= 0.0 or abs(ph) < 1e-13:
                break
        if ph < 0.0 and np.isfinite(ph):
            p = p - ph * g / max(g @ g, 1e-300)
        x[v] = p
        count += 1
    return count


def penetration(x, collider, movable=None):
    phi, _ = collider.sdf(x if movable is None else x[movable])
    phi = phi[np.isfinite(phi)]
    return float(max(0.0, -phi.min())) if len(phi) else 0.0


# ---------------------------------------------------------------------------
# two-way sphere


@dataclass
class RigidSphere:
    center: np.ndarray
    radius: float
    mass: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).copy()
        self.velocity = np.asarray(self.velocity, dtype=np.float64).copy()
        self.prev_center = self.center.copy()
        if not self.mass > 0:
            raise ValueError("sphere mass must be positive")
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    @property
    def inv_mass(self):
        return 0.0 if np.isinf(self.mass) else 1.0 / self.mass

    def predict(self, dt, gravity):
        self.prev_center = self.center.copy()
        if self.inv_mass > 0:
            self.center = self.center + dt * self.velocity + dt * dt * np.asarray(gravity)

    def finish(self, dt):
        self.velocity = (self.center - self.prev_center) / dt

    def sdf(self, p):
        return SphereCollider(self.center, self.radius).sdf(p)


def project_two_way_sphere(x, inv_mass, sphere: RigidSphere, max_passes=20):
    """Separate particles and sphere along contact normals, split by inverse mass.

    Passes repeat (in vertex order) until nothing penetrates. Modifies ``x`` and
    ``sphere.center`` in place; returns the number of contacts resolved.
    """
    ws = sphere.inv_mass
    contacts = 0
    for _ in range(max_passes):
        r = x - sphere.center
        dist = np.linalg.norm(r, axis=1)
        hits = np.nonzero(dist < sphere.radius)[0]
        if len(hits) == 0:
            break
        for v in hits:
            r = x[v] - sphere.center
            dist = np.linalg.norm(r)
            depth = sphere.radius - dist
            if depth <= 0:
                continue
            if dist == 0:
                log.warning("vertex %d at sphere center; skipped", v)
                continue
            n = r / dist
            wp = inv_mass[v]
            wsum = wp + ws
            if wsum == 0:
                continue
            x[v] = x[v] + (wp / wsum) * depth * n
            sphere.center = sphere.center - (ws / wsum) * depth * n
            contacts += 1
    return contacts


# ---------------------------------------------------------------------------
# collection used by the engine


@dataclass
class ProjectionSet:
    pins: list = field(default_factory=list)  # PinSet
    colliders: list = field(default_factory=list)  # plane / sphere / grid
    spheres: list = field(default_factory=list)  # RigidSphere (two-way)

    def begin_substep(self, dt, gravity):
        for s in self.spheres:
            s.predict(dt, gravity)

    def end_substep(self, dt):
        for s in self.spheres:
            s.finish(dt)

    def apply(self, x, inv_mass, t):
        """Run every projection in place on ``x``."""
        for p in self.pins:
            project_pins(x, p, t)
        free = inv_mass > 0
        for c in self.colliders:
            project_sdf(x, c, movable=free)
        for s in self.spheres:
            project_two_way_sphere(x, inv_mass, s)

    def max_penetration(self, x, inv_mass):
        free = inv_mass > 0
        out = 0.0
        for c in list(self.colliders) + list(self.spheres):
            out = max(out, penetration(x, c, free))
        return out

    @property
    def empty(self):
        return not (self.pins or self.colliders or self.spheres)
