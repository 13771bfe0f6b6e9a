"""Meshes, rest-state precomputation and element coloring."""

from __future__ import annotations

import io
import itertools
import os
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Raised for malformed or invalid mesh input."""


@dataclass
class TriMesh:
    vertices: np.ndarray  # (n, 3) float64
    triangles: np.ndarray  # (t, 3) int64
    hinges: np.ndarray = field(default=None)  # (h, 4): e0, e1, v_left, v_right

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.hinges is None:
            self.hinges = build_hinges(self.triangles)
        self.hinges = np.ascontiguousarray(self.hinges, dtype=np.int64).reshape(-1, 4)
        self.validate()

    def validate(self):
        n = len(self.vertices)
        for name, idx in (("triangle", self.triangles), ("hinge", self.hinges)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                bad = int(np.nonzero((idx < 0) | (idx >= n))[0][0])
                raise MeshError(f"{name} {bad} has a vertex index out of range")
        areas = triangle_areas(self.vertices, self.triangles)
        if np.any(areas <= 0.0):
            raise MeshError(f"triangle {int(np.argmin(areas))} is degenerate")

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted."""
        return unique_edges(self.triangles)


@dataclass
class TetMesh:
    vertices: np.ndarray  # (n, 3)
    tets: np.ndarray  # (t, 4)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64).reshape(-1, 4)
        n = len(self.vertices)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= n):
            raise MeshError("tet vertex index out of range")
        vol = tet_volumes(self.vertices, self.tets)
        if np.any(vol <= 0.0):
            raise MeshError(f"tet {int(np.argmin(vol))} has non-positive rest volume")

    @property
    def boundary_triangles(self) -> np.ndarray:
        """Faces referenced by exactly one tet, oriented outward."""
        faces = {}
        for t in self.tets:
            a, b, c, d = (int(i) for i in t)
            for f in ((a, c, b), (a, b, d), (a, d, c), (b, c, d)):
                key = tuple(sorted(f))
                if key in faces:
                    del faces[key]
                else:
                    faces[key] = f
        return np.array(sorted(faces.values()), dtype=np.int64).reshape(-1, 3)


@dataclass
class RestState:
    """Precomputed rest quantities, indexed like the corresponding element lists."""

    tet_dm_inv: np.ndarray  # (t, 3, 3)
    tet_volume: np.ndarray
    tri_dm_inv: np.ndarray  # (t, 2, 2) in the local 2D frame
    tri_area: np.ndarray
    edge_length: np.ndarray
    hinge_angle: np.ndarray


@dataclass
class Coloring:
    colors: np.ndarray  # color index per element
    classes: list  # list of int arrays, one per color

    @property
    def num_colors(self) -> int:
        return len(self.classes)

    @property
    def order(self) -> np.ndarray:
        """Elements concatenated color by color."""
        if not self.classes:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.classes).astype(np.int64)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(c) for c in self.classes])]).astype(np.int64)


# ---------------------------------------------------------------------------
# geometry helpers


def triangle_areas(vertices, triangles):
    if len(triangles) == 0:
        return np.zeros(0)
    p = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def tet_volumes(vertices, tets):
    """Signed volumes."""
    if len(tets) == 0:
        return np.zeros(0)
    p = vertices[tets]
    ds = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
    return np.linalg.det(ds) / 6.0


def unique_edges(triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def build_hinges(triangles) -> np.ndarray:
    """Hinge stencils (e0, e1, v_left, v_right) for every interior edge.

    ``e0 < e1``; the left face is the one traversing e0 -> e1. Rejects edges
    shared by more than two faces.
    """
    faces_of = {}
    for f, tri in enumerate(triangles):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(min(a, b)), int(max(a, b)))
            faces_of.setdefault(key, []).append(f)
    hinges = []
    for (a, b), fs in sorted(faces_of.items()):
        if len(fs) > 2:
            raise MeshError(f"non-manifold edge ({a}, {b}) shared by faces {fs}")
        if len(fs) < 2:
            continue
        thirds = []
        forward = []
        for f in fs:
            tri = [int(i) for i in triangles[f]]
            thirds.append(next(i for i in tri if i != a and i != b))
            k = tri.index(a)
            forward.append(tri[(k + 1) % 3] == b)
        if forward[1] and not forward[0]:
            thirds.reverse()
        hinges.append((a, b, thirds[0], thirds[1]))
    return np.array(hinges, dtype=np.int64).reshape(-1, 4)


def dihedral_angles(vertices, hinges):
    """Signed dihedral angles, vectorized; see :func:`gpbd.energies.dihedral_angle`."""
    if len(hinges) == 0:
        return np.zeros(0)
    p = vertices[hinges]
    x0, x1, xl, xr = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
    e = x1 - x0
    n1 = np.cross(e, xl - x0)
    n2 = np.cross(xr - x0, e)
    en = e / np.linalg.norm(e, axis=1)[:, None]
    sin = np.einsum("ij,ij->i", np.cross(n1, n2), en)
    cos = np.einsum("ij,ij->i", n1, n2)
    return np.arctan2(sin, cos)


def compute_rest_state(mesh) -> RestState:
    """Rest quantities for a TriMesh or TetMesh."""
    empty3 = np.zeros((0, 3, 3))
    empty2 = np.zeros((0, 2, 2))
    if isinstance(mesh, TetMesh):
        p = mesh.vertices[mesh.tets]
        dm = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
        return RestState(
            tet_dm_inv=np.linalg.inv(dm),
            tet_volume=np.abs(np.linalg.det(dm)) / 6.0,
            tri_dm_inv=empty2,
            tri_area=np.zeros(0),
            edge_length=np.zeros(0),
            hinge_angle=np.zeros(0),
        )
    v, t = mesh.vertices, mesh.triangles
    edges = mesh.edges
    return RestState(
        tet_dm_inv=empty3,
        tet_volume=np.zeros(0),
        tri_dm_inv=triangle_rest_inverse(v, t),
        tri_area=triangle_areas(v, t),
        edge_length=np.linalg.norm(v[edges[:, 1]] - v[edges[:, 0]], axis=1),
        hinge_angle=dihedral_angles(v, mesh.hinges),
    )


def triangle_rest_inverse(vertices, triangles):
    """Inverse 2x2 rest matrices; the first rest edge is the local x axis."""
    out = np.empty((len(triangles), 2, 2))
    for f, (a, b, c) in enumerate(triangles):
        e1 = vertices[b] - vertices[a]
        e2 = vertices[c] - vertices[a]
        l1 = np.linalg.norm(e1)
        ex = e1 / l1
        n = np.cross(e1, e2)
        ey = np.cross(n / np.linalg.norm(n), ex)
        dm = np.array([[l1, e2 @ ex], [0.0, e2 @ ey]])
        out[f] = np.linalg.inv(dm)
    return out


# ---------------------------------------------------------------------------
# generators


def generate_grid_cloth(nx: int, ny: int, spacing: float) -> TriMesh:
    """Row-major nx-by-ny vertex grid in the z=0 plane with alternating diagonals."""
    if nx < 2 or ny < 2:
        raise MeshError("grid needs at least 2x2 vertices")
    if spacing <= 0:
        raise MeshError("spacing must be positive")
    jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    verts = np.stack([ii.ravel() * spacing, jj.ravel() * spacing, np.zeros(nx * ny)], axis=1)
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            v00 = j * nx + i
            v10, v01, v11 = v00 + 1, v00 + nx, v00 + nx + 1
            if (i + j) % 2 == 0:
                tris += [(v00, v10, v11), (v00, v11, v01)]
            else:
                tris += [(v00, v10, v01), (v10, v11, v01)]
    return TriMesh(verts, np.array(tris, dtype=np.int64))


# Freudenthal split: one tet per axis permutation, all sharing the cell diagonal.
_CELL_TETS = []
for _perm in itertools.permutations(range(3)):
    _c = [0, 0, 0]
    _path = [tuple(_c)]
    for _ax in _perm:
        _c[_ax] = 1
        _path.append(tuple(_c))
    _CELL_TETS.append(_path)


def generate_cube_tets(n: int, edge: float = 1.0) -> TetMesh:
    """(n+1)^3 vertices, every hex cell split into 6 tets along its main diagonal."""
    if n < 1:
        raise MeshError("need at least one cell per side")
    m = n + 1
    kk, jj, ii = np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij")
    h = edge / n
    verts = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1) * h

    def vid(i, j, k):
        return i + m * (j + m * k)

    tets = []
    for k in range(n):
        for j in range(n):
            for i in range(n):
                for path in _CELL_TETS:
                    tets.append([vid(i + a, j + b, k + c) for a, b, c in path])
    tets = np.array(tets, dtype=np.int64)
    vol = tet_volumes(verts, tets)
    flip = vol < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return TetMesh(verts, tets)


# ---------------------------------------------------------------------------
# file formats


def _read_text(source) -> str:
    if isinstance(source, bytes):
        return source.decode()
    if isinstance(source, (str, os.PathLike)):
        if isinstance(source, str) and "\n" in source:
            return source
        with open(source) as fh:
            return fh.read()
    data = source.read()
    return data.decode() if isinstance(data, bytes) else data


def load_tri_mesh(source) -> TriMesh:
    """Parse a triangle-only OBJ (``v`` and ``f`` records, 1-based indices)."""
    verts, faces = [], []
    for lineno, raw in enumerate(_read_text(source).splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "v":
                if len(tok) < 4:
                    raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise MeshError(f"line {lineno}: face with {len(tok) - 1} vertices, only triangles supported")
                idx = []
                for t in tok[1:]:
                    k = int(t.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                faces.append(idx)
        except ValueError as exc:
            if isinstance(exc, MeshError):
                raise
            raise MeshError(f"line {lineno}: cannot parse {raw!r}") from exc
    if not verts or not faces:
        raise MeshError("OBJ contains no vertices or faces")
    faces = np.array(faces, dtype=np.int64)
    if faces.min() < 0 or faces.max() >= len(verts):
        bad = int(np.nonzero((faces < 0) | (faces >= len(verts)))[0][0])
        raise MeshError(f"face {bad}: vertex index out of range")
    for f, tri in enumerate(faces):
        if len(set(tri.tolist())) < 3:
            raise MeshError(f"face {f}: repeated vertex")
    return TriMesh(np.array(verts), faces)


def _table_rows(text):
    rows = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    return rows


def load_tet_mesh(node_source, ele_source) -> TetMesh:
    """Parse TetGen-style ``.node``/``.ele`` text.

    The first line of each file is a header whose first number is the record
    count. Records start with their index; the index base (0 or 1) is taken
    from the first record. Tets with negative signed volume are reordered.
    """
    nodes = _table_rows(_read_text(node_source))
    eles = _table_rows(_read_text(ele_source))
    try:
        n = int(nodes[0][0])
        node_rows = nodes[1 : n + 1]
        base = int(node_rows[0][0])
        verts = np.zeros((n, 3))
        for r in node_rows:
            verts[int(r[0]) - base] = [float(t) for t in r[1:4]]
        t = int(eles[0][0])
        tets = np.array([[int(i) - base for i in r[1:5]] for r in eles[1 : t + 1]], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed node/ele input: {exc}") from exc
    if len(tets) != t or len(node_rows) != n:
        raise MeshError("record count does not match header")
    for k, tet in enumerate(tets):
        if len(set(tet.tolist())) < 4:
            raise MeshError(f"tet {k}: repeated vertex index")
    if tets.min() < 0 or tets.max() >= n:
        raise MeshError("tet vertex index out of range")
    vol = tet_volumes(verts, tets)
    if np.any(np.abs(vol) <= 1e-14 * max(1.0, np.abs(vol).max())):
        raise MeshError(f"tet {int(np.argmin(np.abs(vol)))} has zero volume")
    flip = vol < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return TetMesh(verts, tets)


def write_obj(path_or_file, vertices, triangles):
    buf = io.StringIO()
    for p in vertices:
        buf.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
    for t in triangles:
        buf.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    _write(path_or_file, buf.getvalue())


def write_node(path_or_file, vertices):
    buf = io.StringIO()
    buf.write(f"{len(vertices)} 3 0 0\n")
    for i, p in enumerate(vertices):
        buf.write(f"{i} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
    _write(path_or_file, buf.getvalue())


def write_ele(path_or_file, tets):
    buf = io.StringIO()
    buf.write(f"{len(tets)} 4 0\n")
    for i, t in enumerate(tets):
        buf.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")
    _write(path_or_file, buf.getvalue())


def _write(target, text):
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# coloring


def color_elements(stencils) -> Coloring:
    """Greedy first-fit coloring of the dual graph, in element order.

    Each vertex keeps a bitmask of the colors already used by elements touching
    it, so an element takes the lowest color absent from the union of its
    vertices' masks.
    """
    stencils = [np.asarray(s).ravel() for s in stencils]
    if not stencils:
        raise ValueError("no elements to color")
    used = {}
    colors = np.empty(len(stencils), dtype=np.int64)
    for e, st in enumerate(stencils):
        mask = 0
        for v in st:
            if v >= 0:
                mask |= used.get(int(v), 0)
        c = (~mask & (mask + 1)).bit_length() - 1
        colors[e] = c
        bit = 1 << c
        for v in st:
            if v >= 0:
                used[int(v)] = used.get(int(v), 0) | bit
    classes = [np.nonzero(colors == c)[0] for c in range(int(colors.max()) + 1)]
    return Coloring(colors, classes)


def coloring_is_valid(stencils, coloring: Coloring) -> bool:
    """Exhaustive check: elements sharing a vertex never share a color."""
    by_vertex = {}
    for e, st in enumerate(stencils):
        for v in np.asarray(st).ravel():
            if v >= 0:
                by_vertex.setdefault(int(v), []).append(e)
    for elems in by_vertex.values():
        cols = coloring.colors[elems]
        if len(np.unique(cols)) != len(cols):
            return False
    return True
