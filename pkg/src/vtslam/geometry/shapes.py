"""Ground-truth object shapes with exact signed distance functions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import NonWatertightMesh, TriangleMesh

SPHERE_TRACE_STEPS = 256
SPHERE_TRACE_EPS = 1e-6


class GroundTruthShape:
    """Base class. Subclasses implement ``sdf`` in the shape's own frame."""

    kind = "abstract"

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def normal(self, pts: np.ndarray, h: float = 1e-6) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        g = np.empty_like(pts)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[:, k] = self.sdf(pts + e) - self.sdf(pts - e)
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)

    def extent(self) -> float:
        """Radius of a bounding sphere about the origin."""
        raise NotImplementedError

    def to_mesh(self, resolution: int = 96) -> TriangleMesh:
        return _mesh_from_sdf(self.sdf, self.extent() * 1.1, resolution)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(eq=False)
class Sphere(GroundTruthShape):
    radius: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    kind = "sphere"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)

    def sdf(self, pts):
        return np.linalg.norm(np.atleast_2d(pts) - self.center, axis=-1) - self.radius

    def extent(self):
        return float(np.linalg.norm(self.center) + self.radius)

    def to_mesh(self, resolution: int = 4) -> TriangleMesh:
        m = icosphere(resolution)
        return TriangleMesh(m.vertices * self.radius + self.center, m.faces)

    def to_dict(self):
        return {"kind": self.kind, "radius": self.radius, "center": self.center.tolist()}


@dataclass(eq=False)
class Box(GroundTruthShape):
    """Axis-aligned box centered at the origin; ``size`` holds full side lengths."""

    size: np.ndarray
    kind = "box"

    def __post_init__(self):
        self.size = np.broadcast_to(np.asarray(self.size, dtype=float), (3,)).copy()

    def sdf(self, pts):
        q = np.abs(np.atleast_2d(pts)) - self.size / 2
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def extent(self):
        return float(np.linalg.norm(self.size / 2))

    def to_mesh(self, resolution: int = 0) -> TriangleMesh:
        h = self.size / 2
        v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float) * h
        # outward-facing, counter-clockwise
        f = np.array([
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ])
        return TriangleMesh(v, f)

    def to_dict(self):
        return {"kind": self.kind, "size": self.size.tolist()}


@dataclass(eq=False)
class RoundedBox(GroundTruthShape):
    size: np.ndarray
    rounding: float
    kind = "rounded-box"

    def __post_init__(self):
        self.size = np.broadcast_to(np.asarray(self.size, dtype=float), (3,)).copy()
        if np.any(self.size / 2 <= self.rounding):
            raise ValueError("rounding radius must be smaller than half the box size")

    def sdf(self, pts):
        q = np.abs(np.atleast_2d(pts)) - (self.size / 2 - self.rounding)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside - self.rounding

    def extent(self):
        return float(np.linalg.norm(self.size / 2))

    def to_dict(self):
        return {"kind": self.kind, "size": self.size.tolist(), "rounding": self.rounding}


@dataclass(eq=False)
class Capsule(GroundTruthShape):
    a: np.ndarray
    b: np.ndarray
    radius: float
    kind = "capsule"

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.radius <= 0:
            raise ValueError("capsule radius must be positive")

    def sdf(self, pts):
        return segment_distance(np.atleast_2d(pts), self.a, self.b) - self.radius

    def extent(self):
        return float(max(np.linalg.norm(self.a), np.linalg.norm(self.b)) + self.radius)

    def to_dict(self):
        return {"kind": self.kind, "a": self.a.tolist(), "b": self.b.tolist(), "radius": self.radius}


@dataclass(eq=False)
class UnionShape(GroundTruthShape):
    parts: list
    kind = "union-of-primitives"

    def sdf(self, pts):
        return np.min([p.sdf(pts) for p in self.parts], axis=0)

    def extent(self):
        return max(p.extent() for p in self.parts)

    def to_dict(self):
        return {"kind": self.kind, "parts": [p.to_dict() for p in self.parts]}


@dataclass(eq=False)
class MeshShape(GroundTruthShape):
    mesh: TriangleMesh
    source: str = ""
    kind = "triangle-mesh"

    def __post_init__(self):
        if not self.mesh.is_watertight():
            raise NonWatertightMesh("every edge must be shared by exactly two faces")

    def sdf(self, pts):
        return self.mesh.signed_distance(np.atleast_2d(pts))

    def extent(self):
        return float(np.linalg.norm(self.mesh.vertices, axis=1).max())

    def to_mesh(self, resolution: int = 0):
        return self.mesh

    def to_dict(self):
        return {"kind": self.kind, "path": self.source}


def segment_distance(pts, a, b):
    ab = b - a
    t = np.clip(((pts - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * ab), axis=-1)


def gt_sdf(shape: GroundTruthShape, p) -> np.ndarray | float:
    p = np.asarray(p, dtype=float)
    out = shape.sdf(np.atleast_2d(p))
    return float(out[0]) if p.ndim == 1 else out


def shape_from_dict(d: dict) -> GroundTruthShape:
    kind = d["kind"]
    if kind == "sphere":
        return Sphere(d["radius"], d.get("center", np.zeros(3)))
    if kind == "box":
        return Box(d["size"])
    if kind == "rounded-box":
        return RoundedBox(d["size"], d["rounding"])
    if kind == "capsule":
        return Capsule(d["a"], d["b"], d["radius"])
    if kind == "union-of-primitives":
        return UnionShape([shape_from_dict(p) for p in d["parts"]])
    if kind == "triangle-mesh":
        from .mesh import load_mesh
        return MeshShape(load_mesh(d["path"]), source=str(d["path"]))
    raise ValueError(f"unknown shape kind {kind!r}")


def icosphere(subdivisions: int = 3) -> TriangleMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(x, dtype=float) / np.linalg.norm(x) for x in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return TriangleMesh(np.array(verts), np.array(faces))


def _mesh_from_sdf(sdf, half: float, resolution: int) -> TriangleMesh:
    from skimage.measure import marching_cubes

    xs = np.linspace(-half, half, resolution)
    grid = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
    vol = sdf(grid).reshape(resolution, resolution, resolution)
    step = xs[1] - xs[0]
    verts, faces, _, _ = marching_cubes(vol, 0.0, spacing=(step, step, step))
    return TriangleMesh(verts - half, faces).largest_component()


def sphere_trace(sdf, origins: np.ndarray, dirs: np.ndarray, t_max, t_min=0.0,
                 max_steps: int = SPHERE_TRACE_STEPS, eps: float = SPHERE_TRACE_EPS):
    """Vectorized sphere tracing with unit step relaxation.

    Returns hit distances along each ray, ``inf`` for misses (including rays
    that do not converge within ``max_steps``).
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = len(dirs)
    t = np.broadcast_to(np.asarray(t_min, dtype=float), (n,)).copy()
    t_max = np.broadcast_to(np.asarray(t_max, dtype=float), (n,))
    hit = np.full(n, np.inf)
    active = np.arange(n)
    o_b = np.broadcast_to(origins, (n, 3))
    for _ in range(max_steps):
        if len(active) == 0:
            break
        d = sdf(o_b[active] + t[active, None] * dirs[active])
        done = np.abs(d) < eps
        hit[active[done]] = t[active[done]]
        t[active] += d
        alive = ~done & (t[active] <= t_max[active]) & (d > -eps)
        active = active[alive]
    return hit


def raycast(shape: GroundTruthShape, origin, direction, t_max: float) -> float | None:
    """Distance to the first surface hit along a unit ray, or None on a miss."""
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    t = sphere_trace(shape.sdf, np.asarray(origin, dtype=float)[None], direction[None], t_max)[0]
    return None if not np.isfinite(t) else float(t)
