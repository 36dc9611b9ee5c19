"""Triangle meshes: IO (PLY/OBJ), area sampling and exact point-to-surface queries."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree


class NonWatertightMesh(ValueError):
    pass


class EmptyMesh(ValueError):
    pass


# region codes returned by closest_point_triangles
FACE, EDGE_AB, EDGE_BC, EDGE_CA, VERT_A, VERT_B, VERT_C = range(7)


def closest_point_triangles(p, a, b, c):
    """Closest point on triangles (a, b, c) to points p, all (N, 3), paired row-wise.

    Region classification follows Ericson, Real-Time Collision Detection 5.1.5.
    Returns (closest points, region codes).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    region = np.full(len(p), -1, dtype=np.int8)
    todo = np.ones(len(p), dtype=bool)

    def assign(cond, pts, code):
        sel = todo & cond
        out[sel] = pts[sel] if pts.ndim == 2 else pts
        region[sel] = code
        todo[sel] = False

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a, VERT_A)
        assign((d3 >= 0) & (d4 <= d3), b, VERT_B)
        assign((d6 >= 0) & (d5 <= d6), c, VERT_C)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab, EDGE_AB)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac, EDGE_CA)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b), EDGE_BC)
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(len(p), dtype=bool), a + ab * v[:, None] + ac * w[:, None], FACE)
    return out, region


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def edges(self) -> np.ndarray:
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    def is_watertight(self) -> bool:
        if len(self.faces) == 0:
            return False
        e = np.sort(self.edges(), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        e = np.unique(np.sort(self.edges(), axis=1), axis=0)
        used = np.unique(self.faces)
        return int(len(used) - len(e) + len(self.faces))

    def transformed(self, pose) -> "TriangleMesh":
        return TriangleMesh(pose.apply(self.vertices), self.faces.copy())

    def largest_component(self) -> "TriangleMesh":
        if len(self.faces) == 0:
            return self
        nv = len(self.vertices)
        e = self.edges()
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(nv, nv))
        _, labels = connected_components(adj, directed=False)
        face_labels = labels[self.faces[:, 0]]
        keep_label = np.bincount(face_labels).argmax()
        faces = self.faces[face_labels == keep_label]
        used = np.unique(faces)
        remap = np.full(nv, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[faces])

    def sample(self, n: int, seed: int = 0, return_faces: bool = False):
        """Area-weighted uniform surface samples; reproducible for a fixed seed."""
        if len(self.faces) == 0:
            raise EmptyMesh("cannot sample an empty mesh")
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        fid = rng.choice(len(self.faces), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        tri = self.triangles[fid]
        pts = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
               + (r1 * r2)[:, None] * tri[:, 2])
        return (pts, fid) if return_faces else pts

    # -- exact distance queries -------------------------------------------

    def _accel(self):
        if "tree" not in self._cache:
            tri = self.triangles
            centroids = tri.mean(axis=1)
            radius = np.linalg.norm(tri - centroids[:, None], axis=2).max()
            self._cache["tree"] = cKDTree(centroids)
            # only vertices that belong to a face bound the search radius
            self._cache["vtree"] = cKDTree(self.vertices[np.unique(self.faces)])
            self._cache["radius"] = float(radius)
        return self._cache["tree"], self._cache["vtree"], self._cache["radius"]

    def closest_points(self, pts: np.ndarray, chunk: int = 4096):
        """Exact closest surface point for each query.

        Candidate triangles come from a centroid KD-tree with a radius equal to
        the nearest-vertex distance (an upper bound) plus the largest centroid
        to corner distance, so no closer triangle can be missed.
        Returns (distance, closest point, face index, region code).
        """
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        if len(self.faces) == 0:
            raise EmptyMesh("mesh has no faces")
        tree, vtree, radius = self._accel()
        n = len(pts)
        dist = np.empty(n)
        closest = np.empty((n, 3))
        face = np.empty(n, dtype=np.int64)
        region = np.empty(n, dtype=np.int8)
        tri = self.triangles
        for s in range(0, n, chunk):
            q = pts[s:s + chunk]
            ub, _ = vtree.query(q)
            cand = tree.query_ball_point(q, ub + radius + 1e-12)
            lens = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(q))
            qi = np.repeat(np.arange(len(q)), lens)
            fi = np.fromiter((f for c in cand for f in c), dtype=np.int64, count=int(lens.sum()))
            cp, reg = closest_point_triangles(q[qi], tri[fi, 0], tri[fi, 1], tri[fi, 2])
            d2 = np.einsum("ij,ij->i", cp - q[qi], cp - q[qi])
            order = np.lexsort((d2, qi))
            first = order[np.r_[0, np.flatnonzero(np.diff(qi[order])) + 1]]
            dist[s:s + len(q)] = np.sqrt(d2[first])
            closest[s:s + len(q)] = cp[first]
            face[s:s + len(q)] = fi[first]
            region[s:s + len(q)] = reg[first]
        return dist, closest, face, region

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return self.closest_points(pts)[0]

    # -- angle-weighted pseudo-normals ---------------------------------------

    def _pseudo_normals(self):
        if "pseudo" in self._cache:
            return self._cache["pseudo"]
        fn = self.face_normals()
        tri = self.triangles
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            e1 = tri[:, (k + 1) % 3] - tri[:, k]
            e2 = tri[:, (k + 2) % 3] - tri[:, k]
            cosang = np.einsum("ij,ij->i", e1, e2) / (
                np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(vn, self.faces[:, k], ang[:, None] * fn)
        # edge normals: sum of the two adjacent face normals, keyed by sorted vertex pair
        edges = np.sort(self.edges(), axis=1)
        nv = len(self.vertices)
        keys = edges[:, 0] * nv + edges[:, 1]
        uniq, inv = np.unique(keys, return_inverse=True)
        en = np.zeros((len(uniq), 3))
        np.add.at(en, inv, np.tile(fn, (3, 1)))
        nf = len(self.faces)
        # per face, per local edge (ab, bc, ca) -> row in en
        edge_rows = inv.reshape(3, nf).T
        self._cache["pseudo"] = (fn, vn, en, edge_rows)
        return self._cache["pseudo"]

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance, negative inside, signed with angle-weighted pseudo-normals."""
        dist, cp, face, region = self.closest_points(pts)
        fn, vn, en, edge_rows = self._pseudo_normals()
        normal = fn[face].copy()
        for code, k in ((EDGE_AB, 0), (EDGE_BC, 1), (EDGE_CA, 2)):
            sel = region == code
            normal[sel] = en[edge_rows[face[sel], k]]
        for code, k in ((VERT_A, 0), (VERT_B, 1), (VERT_C, 2)):
            sel = region == code
            normal[sel] = vn[self.faces[face[sel], k]]
        side = np.einsum("ij,ij->i", np.asarray(pts, dtype=float).reshape(-1, 3) - cp, normal)
        return np.where(side < 0, -dist, dist)


# -- file formats -------------------------------------------------------------

def save_ply(mesh: TriangleMesh, path, vertex_labels=None) -> None:
    """Write an ASCII PLY; optional integer per-vertex ``label`` property."""
    path = Path(path)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
             "property double x", "property double y", "property double z"]
    if vertex_labels is not None:
        lines.append("property uchar label")
    lines += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices",
              "end_header"]
    body = []
    for i, v in enumerate(mesh.vertices):
        row = "%.17g %.17g %.17g" % tuple(v)
        if vertex_labels is not None:
            row += f" {int(vertex_labels[i])}"
        body.append(row)
    body += [f"3 {f[0]} {f[1]} {f[2]}" for f in mesh.faces]
    path.write_text("\n".join(lines + body) + "\n")


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B", "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H", "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def load_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.index(b"end_header") + len(b"end_header")
    end = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    elements = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            elements[-1][2].append(tok[1:])
    verts, faces = [], []
    if fmt == "ascii":
        rows = data[end:].decode("ascii").split("\n")
        it = iter(r for r in rows if r.strip())
        for name, count, props in elements:
            for _ in range(count):
                vals = next(it).split()
                if name == "vertex":
                    names = [p[-1] for p in props]
                    verts.append([float(vals[names.index(k)]) for k in "xyz"])
                elif name == "face":
                    n = int(vals[0])
                    faces.append([int(x) for x in vals[1:1 + n]])
    else:
        order = "<" if fmt == "binary_little_endian" else ">"
        off = end
        for name, count, props in elements:
            for _ in range(count):
                rec = {}
                for p in props:
                    if p[0] == "list":
                        cfmt, ifmt = _PLY_TYPES[p[1]], _PLY_TYPES[p[2]]
                        (n,) = struct.unpack_from(order + cfmt, data, off)
                        off += struct.calcsize(cfmt)
                        rec[p[-1]] = struct.unpack_from(order + ifmt * n, data, off)
                        off += struct.calcsize(ifmt) * n
                    else:
                        f = _PLY_TYPES[p[0]]
                        (rec[p[-1]],) = struct.unpack_from(order + f, data, off)
                        off += struct.calcsize(f)
                if name == "vertex":
                    verts.append([rec["x"], rec["y"], rec["z"]])
                elif name == "face":
                    faces.append(list(rec.get("vertex_indices", rec.get("vertex_index", ()))))
    return TriangleMesh(np.array(verts, dtype=float), _triangulate(faces))


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            faces.append([int(t.split("/")[0]) - 1 for t in tok[1:]])
    return TriangleMesh(np.array(verts, dtype=float), _triangulate(faces))


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {v[0]!r} {v[1]!r} {v[2]!r}" for v in mesh.vertices]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def _triangulate(faces) -> np.ndarray:
    tris = []
    for f in faces:
        for k in range(1, len(f) - 1):
            tris.append([f[0], f[k], f[k + 1]])
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def load_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return load_ply(path)
    if suffix == ".obj":
        return load_obj(path)
    raise ValueError(f"unsupported mesh format: {suffix}")
