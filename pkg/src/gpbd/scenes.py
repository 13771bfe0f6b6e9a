"""Declarative scenes: YAML schema, scene construction, and the frame/metrics runner."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import energies as en
from .engine import ParticleSystem, Simulation, SimulationError, SolverConfig
from .mesh import (
    TetMesh,
    TriMesh,
    generate_cube_tets,
    generate_grid_cloth,
    load_tet_mesh,
    load_tri_mesh,
    tet_volumes,
    triangle_areas,
    write_node,
    write_obj,
)
from .projections import (
    Keyframes,
    PinMotion,
    PinSet,
    PlaneCollider,
    ProjectionSet,
    RigidSphere,
    Rotation,
    SphereCollider,
    load_grid_sdf,
)

log = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "configs"

Vec3 = tuple[float, float, float]


class SceneError(ValueError):
    pass


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ---------------------------------------------------------------------------
# schema


class GridClothMesh(_Model):
    type: Literal["grid_cloth"]
    nx: int = Field(ge=2)
    ny: int = Field(ge=2)
    spacing: float = Field(gt=0)
    plane: Literal["xy", "xz"] = "xy"
    translate: Vec3 = (0.0, 0.0, 0.0)


class CubeMesh(_Model):
    type: Literal["cube"]
    n: int = Field(ge=1)
    edge: float = Field(default=1.0, gt=0)
    translate: Vec3 = (0.0, 0.0, 0.0)


class ObjMesh(_Model):
    type: Literal["obj"]
    path: str
    translate: Vec3 = (0.0, 0.0, 0.0)


class TetgenMesh(_Model):
    type: Literal["tetgen"]
    node: str
    ele: str
    translate: Vec3 = (0.0, 0.0, 0.0)


MeshSpec = Annotated[Union[GridClothMesh, CubeMesh, ObjMesh, TetgenMesh], Field(discriminator="type")]


class ClothMaterial(_Model):
    model: Literal["cloth"]
    density: float = Field(gt=0)  # kg/m^2
    stretch_stiffness: float = Field(gt=0)  # N/m
    bending_stiffness: float = Field(ge=0)  # N m
    bending_scale: Optional[float] = Field(default=None, gt=0)  # default: mean rest edge length squared


class SpringMaterial(_Model):
    model: Literal["springs"]
    density: float = Field(gt=0)  # kg/m^2 (surfaces) or kg/m^3 (volumes)
    compliance: float = Field(ge=0)  # m/N


class NeoHookeanMaterial(_Model):
    model: Literal["neo_hookean"]
    density: float = Field(gt=0)  # kg/m^3
    youngs_modulus: float = Field(gt=0)
    poisson_ratio: float
    variant: Literal["log", "stable"] = "log"

    @field_validator("poisson_ratio")
    @classmethod
    def _nu(cls, v):
        if not -1.0 < v < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")
        return v


MaterialSpec = Annotated[Union[ClothMaterial, SpringMaterial, NeoHookeanMaterial], Field(discriminator="model")]


class KeyframeMotion(_Model):
    type: Literal["keyframes"]
    times: list[float]
    offsets: list[Vec3]

    @model_validator(mode="after")
    def _lengths(self):
        if len(self.times) != len(self.offsets) or not self.times:
            raise ValueError("times and offsets must be non-empty and of equal length")
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("keyframe times must be non-decreasing")
        return self


class RotationMotion(_Model):
    type: Literal["rotation"]
    axis: Vec3
    angle: float  # rad
    duration: float = Field(ge=0)
    center: Optional[Vec3] = None  # default: centroid of the pinned vertices


MotionSpec = Annotated[Union[KeyframeMotion, RotationMotion], Field(discriminator="type")]


class PinSpec(_Model):
    vertices: list[int] = []
    # union of boxes; each maps an axis to the min or max side of the rest bounding box
    where: list[dict[Literal["x", "y", "z"], Literal["min", "max"]]] = []
    motion: Optional[MotionSpec] = None

    @model_validator(mode="after")
    def _some(self):
        if not self.vertices and not self.where:
            raise ValueError("pin needs 'vertices' or 'where'")
        return self


class PlaneSpec(_Model):
    type: Literal["plane"]
    point: Vec3
    normal: Vec3
    friction: float = 0.0


class SphereSpec(_Model):
    type: Literal["sphere"]
    center: Vec3
    radius: float = Field(gt=0)
    friction: float = 0.0


class SdfSpec(_Model):
    type: Literal["sdf"]
    path: str
    friction: float = 0.0


class RigidSphereSpec(_Model):
    type: Literal["rigid_sphere"]
    center: Vec3
    radius: float = Field(gt=0)
    mass: float = Field(gt=0)
    velocity: Vec3 = (0.0, 0.0, 0.0)


ColliderSpec = Annotated[Union[PlaneSpec, SphereSpec, SdfSpec, RigidSphereSpec], Field(discriminator="type")]


class WindSpec(_Model):
    velocity: Vec3
    drag: float = Field(ge=0)


class InitialSpec(_Model):
    randomize: bool = False  # uniform in the rest bounding box
    flatten_axis: Optional[Literal["x", "y", "z"]] = None
    flatten_factor: float = Field(default=1.0, ge=0)
    velocity: Vec3 = (0.0, 0.0, 0.0)


class SolverSpec(_Model):
    dt: float = Field(gt=0)
    substeps: int = Field(default=1, ge=1)
    iterations: int = Field(default=3, ge=1)
    newton_iterations: int = Field(default=1, ge=1)
    mode: Literal["gauss-seidel", "jacobi"] = "gauss-seidel"
    omega: Optional[float] = None
    damping: float = Field(default=0.0, ge=0)
    inversion_fix: Literal["none", "log", "all"] = "log"  # tets given the inversion-recovery projection

    @model_validator(mode="after")
    def _omega(self):
        if self.omega is None:
            object.__setattr__(self, "omega", 1.5 if self.mode == "jacobi" else 1.0)
        if not 1.0 <= self.omega < 2.0:
            raise ValueError("omega must lie in [1, 2)")
        return self


class OutputSpec(_Model):
    steps: int = Field(default=100, ge=1)
    frame_stride: int = Field(default=1, ge=1)
    frames: bool = True


class SceneSpec(_Model):
    name: str
    mesh: MeshSpec
    material: MaterialSpec
    solver: SolverSpec
    gravity: Vec3 = (0.0, 0.0, -9.81)
    pins: list[PinSpec] = []
    colliders: list[ColliderSpec] = []
    wind: Optional[WindSpec] = None
    initial: InitialSpec = InitialSpec()
    output: OutputSpec = OutputSpec()

    @model_validator(mode="after")
    def _consistent(self):
        volumetric = self.mesh.type in ("cube", "tetgen")
        if isinstance(self.material, ClothMaterial) and volumetric:
            raise ValueError("cloth material needs a surface mesh")
        if isinstance(self.material, NeoHookeanMaterial) and not volumetric:
            raise ValueError("neo_hookean material needs a tet mesh")
        if self.wind is not None and volumetric:
            raise ValueError("wind needs a surface mesh")
        return self


def _format_error(err: ValidationError):
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "invalid scene:\n  " + "\n  ".join(lines)


def parse_scene(text: str) -> SceneSpec:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SceneError(f"malformed YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise SceneError("scene config must be a mapping")
    try:
        return SceneSpec.model_validate(data)
    except ValidationError as exc:
        raise SceneError(_format_error(exc)) from None


def print_scene(spec: SceneSpec) -> str:
    return yaml.safe_dump(spec.model_dump(mode="json"), sort_keys=False)


def load_scene(path) -> tuple[SceneSpec, Path]:
    path = Path(path)
    return parse_scene(path.read_text()), path.parent


def bundled_scenes(include_full_scale=False) -> list[Path]:
    out = sorted(CONFIG_DIR.glob("*.yaml"))
    if include_full_scale:
        out += sorted((CONFIG_DIR / "full_scale").glob("*.yaml"))
    return out


# ---------------------------------------------------------------------------
# construction


def apply_wind(x, v, triangles, wind_velocity, drag):
    """Quadratic normal drag per face, split equally over its three vertices.

    f = c_d A (u.n)|u.n| n with u = wind - mean face velocity and n the unit
    face normal.
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    tri = np.asarray(triangles, dtype=np.int64)
    cr = np.cross(x[tri[:, 1]] - x[tri[:, 0]], x[tri[:, 2]] - x[tri[:, 0]])
    norm = np.linalg.norm(cr, axis=1)
    ok = norm > 0
    if not ok.all():
        log.debug("wind: skipping %d degenerate faces", int((~ok).sum()))
    n = np.zeros_like(cr)
    n[ok] = cr[ok] / norm[ok, None]
    area = 0.5 * norm
    u = np.asarray(wind_velocity, dtype=np.float64)[None, :] - v[tri].mean(axis=1)
    un = np.einsum("ij,ij->i", u, n)
    f = (drag * area * un * np.abs(un))[:, None] * n
    out = np.zeros_like(x)
    for c in range(3):
        np.add.at(out, tri[:, c], f / 3.0)
    return out


def _resolve(base: Path | None, p: str) -> Path:
    path = Path(p)
    if not path.is_absolute() and base is not None:
        path = base / path
    return path


def _build_mesh(spec, base):
    m = spec.mesh
    if m.type == "grid_cloth":
        mesh = generate_grid_cloth(m.nx, m.ny, m.spacing)
        if m.plane == "xz":
            v = mesh.vertices
            mesh = TriMesh(np.stack([v[:, 0], np.zeros(len(v)), v[:, 1]], axis=1), mesh.triangles)
    elif m.type == "cube":
        mesh = generate_cube_tets(m.n, m.edge)
    elif m.type == "obj":
        mesh = load_tri_mesh(_resolve(base, m.path))
    else:
        mesh = load_tet_mesh(_resolve(base, m.node), _resolve(base, m.ele))
    verts = mesh.vertices + np.asarray(m.translate)
    if isinstance(mesh, TetMesh):
        return TetMesh(verts, mesh.tets)
    return TriMesh(verts, mesh.triangles)


def _lumped_mass(mesh, density):
    mass = np.zeros(len(mesh.vertices))
    if isinstance(mesh, TetMesh):
        np.add.at(mass, mesh.tets.ravel(), np.repeat(tet_volumes(mesh.vertices, mesh.tets) * density / 4.0, 4))
    else:
        np.add.at(mass, mesh.triangles.ravel(), np.repeat(triangle_areas(mesh.vertices, mesh.triangles) * density / 3.0, 3))
    if np.any(mass <= 0):
        raise SceneError("mesh has vertices not referenced by any element")
    return mass


def _build_terms(spec, mesh):
    mat = spec.material
    if mat.model == "cloth":
        return en.cloth_terms(mesh, en.ClothParams(mat.stretch_stiffness, mat.bending_stiffness, mat.bending_scale))
    if mat.model == "springs":
        if isinstance(mesh, TetMesh):
            t = mesh.tets
            edges = np.concatenate([t[:, [a, b]] for a in range(4) for b in range(a + 1, 4)])
            edges = np.unique(np.sort(edges, axis=1), axis=0)
        else:
            edges = mesh.edges
        return en.spring_terms(mesh.vertices, edges, mat.compliance)
    params = en.NeoHookeanParams.from_young(mat.youngs_modulus, mat.poisson_ratio, mat.variant)
    return en.tet_terms(mesh, params)


def select_vertices(rest, pin: PinSpec):
    """Indices named by a pin block (explicit list plus bounding-box sides)."""
    n = len(rest)
    bad = [i for i in pin.vertices if not 0 <= i < n]
    if bad:
        raise SceneError(f"pin vertex {bad[0]} out of range (mesh has {n} vertices)")
    sel = np.zeros(n, dtype=bool)
    sel[list(pin.vertices)] = True
    lo, hi = rest.min(axis=0), rest.max(axis=0)
    tol = 1e-9 * max(1.0, float(np.abs(rest).max()))
    for box in pin.where:
        m = np.ones(n, dtype=bool)
        for ax, side in box.items():
            a = "xyz".index(ax)
            ref = lo[a] if side == "min" else hi[a]
            m &= np.abs(rest[:, a] - ref) <= tol
        sel |= m
    idx = np.nonzero(sel)[0]
    if len(idx) == 0:
        raise SceneError("pin selects no vertices")
    return idx


def _motion(spec: Optional[MotionSpec], rest):
    if spec is None:
        return PinMotion()
    if spec.type == "keyframes":
        return Keyframes(spec.times, spec.offsets)
    center = rest.mean(axis=0) if spec.center is None else np.asarray(spec.center)
    return Rotation(np.asarray(spec.axis), center, spec.angle, spec.duration)


@dataclass
class Scene:
    spec: SceneSpec
    mesh: object
    sim: Simulation
    spheres: list = field(default_factory=list)

    @property
    def surface(self):
        """Triangles written to OBJ frames."""
        if isinstance(self.mesh, TetMesh):
            return self.mesh.boundary_triangles
        return self.mesh.triangles


def build_scene(spec: SceneSpec, base: Path | None = None, seed: int = 0, mode=None, omega=None) -> Scene:
    mesh = _build_mesh(spec, base)
    rest = mesh.vertices
    terms = _build_terms(spec, mesh)
    mass = _lumped_mass(mesh, spec.material.density)

    pins = []
    pinned = np.zeros(len(rest), dtype=bool)
    for p in spec.pins:
        idx = select_vertices(rest, p)
        pins.append(PinSet(idx, rest[idx], _motion(p.motion, rest[idx])))
        pinned[idx] = True

    x = rest.copy()
    rng = np.random.default_rng(seed)
    init = spec.initial
    if init.randomize:
        lo, hi = rest.min(axis=0), rest.max(axis=0)
        x = rng.uniform(lo, hi, size=rest.shape)
    if init.flatten_axis is not None:
        a = "xyz".index(init.flatten_axis)
        c = rest[:, a].mean()
        x[:, a] = c + init.flatten_factor * (x[:, a] - c)
    x[pinned] = rest[pinned]
    v = np.zeros_like(x)
    v[~pinned] = init.velocity

    colliders, spheres = [], []
    for c in spec.colliders:
        if c.type == "plane":
            colliders.append(PlaneCollider(np.asarray(c.point), np.asarray(c.normal), c.friction))
        elif c.type == "sphere":
            colliders.append(SphereCollider(np.asarray(c.center), c.radius, c.friction))
        elif c.type == "sdf":
            grid = load_grid_sdf(_resolve(base, c.path))
            grid.friction = c.friction
            colliders.append(grid)
        else:
            spheres.append(RigidSphere(np.asarray(c.center), c.radius, c.mass, np.asarray(c.velocity)))

    s = spec.solver
    cfg = SolverConfig(
        dt=s.dt, substeps=s.substeps, iterations=s.iterations, newton_iterations=s.newton_iterations,
        mode=mode or s.mode, omega=omega if omega is not None else (None if mode and mode != s.mode else s.omega),
        damping=s.damping, inversion_fix=s.inversion_fix,
    )
    inv_mass = np.where(pinned, 0.0, 1.0 / mass)
    ps = ParticleSystem(x, v, mass, inv_mass)
    sim = Simulation(ps, terms, cfg, ProjectionSet(pins, colliders, spheres), gravity=np.asarray(spec.gravity))
    if spec.wind is not None:
        tri = mesh.triangles
        wind = spec.wind
        sim.external_force = lambda sm: apply_wind(sm.ps.x, sm.ps.v, tri, wind.velocity, wind.drag)
    return Scene(spec, mesh, sim, spheres)


# ---------------------------------------------------------------------------
# runner

METRIC_COLUMNS = (
    "step", "substep", "sweep", "residual", "max_penetration", "energy",
    "sweep_time", "projection_time", "newton_iterations", "failed", "inverted",
)


@dataclass
class RunResult:
    ok: bool
    steps: int
    frames: int
    last_good_frame: int
    error: str = ""
    summary: dict = field(default_factory=dict)


def _write_frame(scene: Scene, out: Path, index: int):
    x = scene.sim.ps.x
    write_obj(out / f"frame_{index:05d}.obj", x, scene.surface)
    if isinstance(scene.mesh, TetMesh):
        write_node(out / f"frame_{index:05d}.node", x)


def run_scene(spec: SceneSpec, out_dir, base: Path | None = None, steps=None, mode=None, omega=None, seed=0,
              on_step=None) -> RunResult:
    """Simulate and write frames, metrics.csv and summary.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = build_scene(spec, base, seed=seed, mode=mode, omega=omega)
    sim = scene.sim
    steps = spec.output.steps if steps is None else steps
    stride = spec.output.frame_stride

    fh = open(out / "metrics.csv", "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(METRIC_COLUMNS)

    def record(_sim, rec):
        writer.writerow([getattr(rec, c) for c in METRIC_COLUMNS])

    sim.on_sweep = record
    frames = 0
    last_good = -1
    if spec.output.frames:
        _write_frame(scene, out, 0)
        frames, last_good = 1, 0
    step_times = []
    ok, error = True, ""
    try:
        for k in range(steps):
            t0 = time.perf_counter()
            sim.step()
            step_times.append(time.perf_counter() - t0)
            if on_step is not None:
                on_step(scene, k)
            if spec.output.frames and (k + 1) % stride == 0:
                _write_frame(scene, out, (k + 1) // stride)
                frames += 1
                last_good = (k + 1) // stride
    except (SimulationError, en.EnergyDomainError) as exc:
        ok, error = False, str(exc)
        log.error("simulation diverged: %s (last good frame %d)", exc, last_good)
    finally:
        fh.close()

    s = spec.solver
    summary = {
        "scene": spec.name,
        "vertices": int(sim.ps.n),
        "elements": int(len(sim.terms)),
        "mode": sim.cfg.mode,
        "omega": sim.cfg.omega,
        "dt": s.dt,
        "substeps": s.substeps,
        "i_G": s.iterations,
        "i_N": s.newton_iterations,
        "steps": len(step_times),
        "t_avg_ms": 1e3 * float(np.mean(step_times)) if step_times else None,
        "frames": frames,
        "last_good_frame": last_good,
        "ok": ok,
        "error": error,
        "colors": int(sim.coloring.num_colors) if sim.coloring is not None else 0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return RunResult(ok, len(step_times), frames, last_good, error, summary)
