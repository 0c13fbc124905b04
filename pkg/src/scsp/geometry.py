"""Triangle meshes, surface sampling, contact frames and candidate sets.

Candidate contact locations are produced by farthest-point sampling over a
dense area-weighted pool of surface points. Each sample carries a local
frame (n, t1, t2) with t2 = n x t1 and t1 built from a fixed world axis.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

FRAME_AXIS = np.array([0.0, 0.0, 1.0])
FALLBACK_AXIS = np.array([1.0, 0.0, 0.0])


class MeshFormatError(ValueError):
    pass


class EmptyCandidateSetError(ValueError):
    pass


def _face_geometry(vertices, faces):
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    cross = np.cross(b - a, c - a)
    area2 = np.linalg.norm(cross, axis=1)
    return cross, area2


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_normals: np.ndarray
    watertight: bool = True
    n_dropped: int = 0

    def __post_init__(self):
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise MeshFormatError("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise MeshFormatError("negative face index")

    @property
    def face_areas(self):
        return 0.5 * _face_geometry(self.vertices, self.faces)[1]

    @property
    def area(self):
        return float(self.face_areas.sum())

    @property
    def triangles(self):
        return self.vertices[self.faces]

    @property
    def face_centers(self):
        return self.triangles.mean(axis=1)

    def volume(self):
        tri = self.triangles
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def is_convex(self, tol=1e-9):
        offsets = np.einsum("ij,ij->i", self.face_normals, self.face_centers)
        d = self.vertices @ self.face_normals.T - offsets[None, :]
        return bool(np.all(d <= tol * max(1.0, np.abs(self.vertices).max())))

    def mass_properties(self, mass):
        """Center of mass and inertia about it for a uniform solid of given mass."""
        return mass_properties(self, mass)

    def translated(self, offset):
        return TriMesh(self.vertices + np.asarray(offset, dtype=float), self.faces.copy(),
                       self.face_normals.copy(), self.watertight, self.n_dropped)

    def scaled(self, s):
        s = np.broadcast_to(np.asarray(s, dtype=float), (3,))
        return build_mesh(self.vertices * s, self.faces)

    def vertex_faces(self):
        """List of face indices touching each vertex."""
        out = [[] for _ in range(len(self.vertices))]
        for f, tri in enumerate(self.faces):
            for v in tri:
                out[v].append(f)
        return out


def _is_watertight(faces):
    # every directed edge must appear once and its reverse once
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    directed = {tuple(e) for e in edges.tolist()}
    if len(directed) != len(edges):
        return False
    return all((b, a) in directed for a, b in directed)


def build_mesh(vertices, faces, orient=True) -> TriMesh:
    """Drop degenerate faces, compute normals and orient them outward."""
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.max() >= len(vertices) or faces.min() < 0):
        raise MeshFormatError("face index out of range")
    cross, area2 = _face_geometry(vertices, faces)
    scale = max(1.0, float(np.abs(vertices).max())) if len(vertices) else 1.0
    keep = area2 > 1e-14 * scale ** 2
    n_dropped = int((~keep).sum())
    if n_dropped:
        log.warning("dropped %d degenerate faces", n_dropped)
    faces, cross, area2 = faces[keep], cross[keep], area2[keep]
    if len(faces) == 0:
        raise MeshFormatError("mesh has no valid faces")
    watertight = _is_watertight(faces)
    if not watertight:
        log.warning("mesh is not watertight; interior tests disabled")
    elif orient:
        tri = vertices[faces]
        vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
        if vol < 0:
            faces = faces[:, ::-1].copy()
            cross = -cross
    normals = cross / area2[:, None]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return TriMesh(vertices, faces, normals, watertight, n_dropped)


def load_mesh(path) -> TriMesh:
    """Read an OBJ file (positions and faces only). Polygons are fan-triangulated."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshFormatError(f"cannot read {path}: {exc}") from exc
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ValueError("face needs 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc
    if not verts or not faces:
        raise MeshFormatError(f"{path}: no vertices or faces")
    return build_mesh(verts, faces)


def write_obj(mesh: TriMesh, path):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- primitives

def make_box(size=(0.1, 0.1, 0.1)) -> TriMesh:
    sx, sy, sz = np.broadcast_to(np.asarray(size, dtype=float), (3,)) / 2
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]]
    faces = [[q[0], q[k], q[k + 1]] for q in quads for k in (1, 2)]
    return build_mesh(v, faces)


def make_prism(n_sides=6, radius=0.05, height=0.1) -> TriMesh:
    ang = 2 * np.pi * np.arange(n_sides) / n_sides
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(n_sides, -height / 2)])
    top = np.column_stack([ring, np.full(n_sides, height / 2)])
    v = np.vstack([bottom, top, [[0, 0, -height / 2], [0, 0, height / 2]]])
    cb, ct = 2 * n_sides, 2 * n_sides + 1
    faces = []
    for i in range(n_sides):
        j = (i + 1) % n_sides
        faces += [[i, j, n_sides + j], [i, n_sides + j, n_sides + i]]
        faces += [[cb, j, i], [ct, n_sides + i, n_sides + j]]
    return build_mesh(v, faces)


def make_icosphere(radius=1.0, subdivisions=2) -> TriMesh:
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return build_mesh(np.array(verts) * radius, f)


def make_primitive(kind: str, **kw) -> TriMesh:
    makers = {"box": make_box, "cube": make_box, "prism": make_prism, "sphere": make_icosphere}
    if kind not in makers:
        raise MeshFormatError(f"unknown primitive {kind!r}")
    return makers[kind](**kw)


# ---------------------------------------------------------------- mass

def mass_properties(mesh: TriMesh, mass: float):
    """(com, inertia about com) of a uniform solid bounded by a watertight mesh."""
    tri = mesh.triangles
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    vol = det.sum() / 6.0
    if vol <= 0:
        raise MeshFormatError("mesh volume must be positive")
    com = (det[:, None] * (a + b + c)).sum(axis=0) / (24.0 * vol)
    # second moment integral of x x^T over each signed tetrahedron (origin, a, b, c)
    s = a + b + c
    C = (np.einsum("i,ij,ik->jk", det, s, s)
         + np.einsum("i,ij,ik->jk", det, a, a)
         + np.einsum("i,ij,ik->jk", det, b, b)
         + np.einsum("i,ij,ik->jk", det, c, c)) / 120.0
    rho = mass / vol
    C = rho * C - mass * np.outer(com, com)
    inertia = np.trace(C) * np.eye(3) - C
    return com, inertia


# ---------------------------------------------------------------- closest point

def closest_points_on_triangles(points, tri):
    """Closest point on each triangle for each query.

    points (Q, 3), tri (F, 3, 3) -> (Q, F, 3). Region tests follow the
    standard Voronoi-region construction."""
    p = np.asarray(points, dtype=float)[:, None, :]
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("qfi,qfi->qf", ab, ap)
    d2 = np.einsum("qfi,qfi->qf", ac, ap)
    bp = p - b
    d3 = np.einsum("qfi,qfi->qf", ab, bp)
    d4 = np.einsum("qfi,qfi->qf", ac, bp)
    cp = p - c
    d5 = np.einsum("qfi,qfi->qf", ab, cp)
    d6 = np.einsum("qfi,qfi->qf", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + ab * v[..., None] + ac * w[..., None]
        # edge bc
        e_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out = np.where(e_bc[..., None], b + (c - b) * np.nan_to_num(t)[..., None], out)
        # edge ac
        e_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        out = np.where(e_ac[..., None], a + ac * np.nan_to_num(t)[..., None], out)
        # edge ab
        e_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        out = np.where(e_ab[..., None], a + ab * np.nan_to_num(t)[..., None], out)
    # vertices last so they take precedence
    out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    return out


def winding_number(mesh: TriMesh, points):
    """Generalized winding number; about 1 inside a closed mesh, 0 outside."""
    tri = mesh.triangles[None] - np.asarray(points, dtype=float)[:, None, None, :]
    a, b, c = tri[:, :, 0], tri[:, :, 1], tri[:, :, 2]
    la, lb, lc = (np.linalg.norm(x, axis=-1) for x in (a, b, c))
    num = np.einsum("qfi,qfi->qf", a, np.cross(b, c))
    den = (la * lb * lc + np.einsum("qfi,qfi->qf", a, b) * lc
           + np.einsum("qfi,qfi->qf", b, c) * la + np.einsum("qfi,qfi->qf", c, a) * lb)
    return (2 * np.arctan2(num, den)).sum(axis=1) / (4 * np.pi)


def signed_distance(mesh: TriMesh, points):
    """Signed distance (negative inside), closest surface point and face.

    Returns (phi (Q,), closest (Q, 3), face (Q,))."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cp = closest_points_on_triangles(points, mesh.triangles)
    d2 = ((cp - points[:, None, :]) ** 2).sum(-1)
    face = np.argmin(d2, axis=1)
    rows = np.arange(len(points))
    closest = cp[rows, face]
    dist = np.sqrt(d2[rows, face])
    if mesh.watertight:
        inside = winding_number(mesh, points) > 0.5
        dist = np.where(inside, -dist, dist)
    return dist, closest, face


# ---------------------------------------------------------------- frames & samples

def contact_frame(n):
    """Tangents (t1, t2) for unit normal(s) n, with t2 = n x t1."""
    n = np.asarray(n, dtype=float)
    single = n.ndim == 1
    n = np.atleast_2d(n)
    a = np.where((np.abs(n @ FRAME_AXIS) > 1 - 1e-6)[:, None], FALLBACK_AXIS, FRAME_AXIS)
    t1 = a - np.einsum("ij,ij->i", a, n)[:, None] * n
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    if single:
        return t1[0], t2[0]
    return t1, t2


@dataclass(frozen=True)
class SurfaceSample:
    p: np.ndarray
    n: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    face_id: int

    @classmethod
    def from_point(cls, p, n, face_id):
        n = np.asarray(n, dtype=float)
        t1, t2 = contact_frame(n)
        return cls(np.asarray(p, dtype=float), n, t1, t2, int(face_id))


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator):
    """Area-weighted uniform surface points, returning (points, face ids)."""
    areas = mesh.face_areas
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    tri = mesh.triangles[face]
    pts = ((1 - s)[:, None] * tri[:, 0] + (s * (1 - r2))[:, None] * tri[:, 1]
           + (s * r2)[:, None] * tri[:, 2])
    return pts, face


def pool_size(K, factor=50, minimum=2000):
    return max(factor * K, minimum)


def farthest_point_sample(mesh: TriMesh, K: int, seed=0, pool=None, rng_seed=0,
                          pool_factor=50, pool_min=2000) -> list[SurfaceSample]:
    """Greedy max-min selection over a dense surface pool.

    seed is either a pool index or a 3D point (projected onto the surface).
    The argmax tie-break is the lowest pool index."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if pool is None:
        pool = sample_surface(mesh, pool_size(K, pool_factor, pool_min), np.random.default_rng(rng_seed))
    pts, face = pool
    if K > len(pts):
        raise ValueError(f"K={K} exceeds pool size {len(pts)}")
    if np.ndim(seed) == 0:
        i0 = int(seed)
        if not 0 <= i0 < len(pts):
            raise ValueError("seed index outside pool")
        first_p, first_f = pts[i0], int(face[i0])
    else:
        _, cp, f = signed_distance(mesh, np.asarray(seed, dtype=float)[None])
        first_p, first_f = cp[0], int(f[0])
    chosen_p, chosen_f = [first_p], [first_f]
    dist = ((pts - first_p) ** 2).sum(axis=1)
    for _ in range(K - 1):
        i = int(np.argmax(dist))  # first maximum = lowest index
        chosen_p.append(pts[i])
        chosen_f.append(int(face[i]))
        dist = np.minimum(dist, ((pts - pts[i]) ** 2).sum(axis=1))
    return [SurfaceSample.from_point(p, mesh.face_normals[f], f) for p, f in zip(chosen_p, chosen_f)]


# ---------------------------------------------------------------- candidate sets

Predicate = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Immutable sample arrays plus a validity mask and a KD-tree over valid points."""
    points: np.ndarray
    normals: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    face_ids: np.ndarray
    valid: np.ndarray
    _tree: cKDTree | None = field(default=None, repr=False)
    _valid_idx: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_samples(cls, samples: Sequence[SurfaceSample], valid=None):
        pts = np.array([s.p for s in samples], dtype=float).reshape(-1, 3)
        nrm = np.array([s.n for s in samples], dtype=float).reshape(-1, 3)
        t1 = np.array([s.t1 for s in samples], dtype=float).reshape(-1, 3)
        t2 = np.array([s.t2 for s in samples], dtype=float).reshape(-1, 3)
        fid = np.array([s.face_id for s in samples], dtype=np.int64)
        valid = np.ones(len(pts), bool) if valid is None else np.asarray(valid, bool)
        return cls._build(pts, nrm, t1, t2, fid, valid)

    @classmethod
    def _build(cls, pts, nrm, t1, t2, fid, valid):
        for a in (pts, nrm, t1, t2, valid):
            a.setflags(write=False)
        vidx = np.flatnonzero(valid)
        tree = cKDTree(pts[vidx]) if len(vidx) else None
        return cls(pts, nrm, t1, t2, fid, valid, tree, vidx)

    def __len__(self):
        return len(self.points)

    @property
    def n_valid(self):
        return int(self.valid.sum())

    @property
    def valid_indices(self):
        return self._valid_idx

    def sample(self, i) -> SurfaceSample:
        return SurfaceSample(self.points[i].copy(), self.normals[i].copy(), self.t1[i].copy(),
                             self.t2[i].copy(), int(self.face_ids[i]))

    @property
    def samples(self):
        return [self.sample(i) for i in range(len(self))]

    def with_valid(self, valid):
        return CandidateSet._build(self.points, self.normals, self.t1, self.t2, self.face_ids,
                                   np.asarray(valid, bool).copy())

    def nearest_index(self, query) -> int:
        """Index (into the full set) of the nearest valid sample; lowest index on ties."""
        if self._tree is None:
            raise EmptyCandidateSetError("no valid candidates")
        q = np.asarray(query, dtype=float)
        k = min(8, len(self._valid_idx))
        d, j = self._tree.query(q, k=k)
        d, j = np.atleast_1d(d), np.atleast_1d(j)
        # exact squared distances on the shortlist, then lowest index among ties
        cand = self._valid_idx[j]
        d2 = ((self.points[cand] - q) ** 2).sum(axis=1)
        best = d2.min()
        if k < len(self._valid_idx) and np.sum(d2 == best) == k:
            # every shortlisted point ties; fall back to a full scan
            return nearest_index_scan(self, q)
        return int(cand[d2 == best].min())

    def to_dict(self):
        return {
            "points": self.points.tolist(),
            "normals": self.normals.tolist(),
            "t1": self.t1.tolist(),
            "t2": self.t2.tolist(),
            "face_ids": self.face_ids.tolist(),
            "valid": self.valid.tolist(),
        }

    def to_json(self, path=None):
        s = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(s)
        return s

    @classmethod
    def from_dict(cls, d):
        return cls._build(np.asarray(d["points"], float).reshape(-1, 3),
                          np.asarray(d["normals"], float).reshape(-1, 3),
                          np.asarray(d["t1"], float).reshape(-1, 3),
                          np.asarray(d["t2"], float).reshape(-1, 3),
                          np.asarray(d["face_ids"], np.int64),
                          np.asarray(d["valid"], bool))


def nearest_index_scan(candidates: CandidateSet, query) -> int:
    """Linear-scan reference for nearest_valid."""
    idx = candidates.valid_indices
    if idx is None or len(idx) == 0:
        raise EmptyCandidateSetError("no valid candidates")
    d2 = ((candidates.points[idx] - np.asarray(query, dtype=float)) ** 2).sum(axis=1)
    return int(idx[np.flatnonzero(d2 == d2.min()).min()])


def apply_valid_mask(samples, predicate: Predicate | None = None) -> CandidateSet:
    """Mark samples valid where predicate(points, normals) holds."""
    cs = samples if isinstance(samples, CandidateSet) else CandidateSet.from_samples(samples)
    if predicate is None:
        valid = np.ones(len(cs), bool)
    else:
        valid = np.asarray(predicate(cs.points, cs.normals), bool).reshape(len(cs))
    if not valid.any():
        raise EmptyCandidateSetError("all samples masked out")
    return cs.with_valid(valid)


def nearest_valid(candidates: CandidateSet, query) -> SurfaceSample:
    return candidates.sample(candidates.nearest_index(query))


# ---------------------------------------------------------------- predicates

def always_true(points, normals):
    return np.ones(len(points), bool)


def half_space(axis, offset=0.0) -> Predicate:
    axis = np.asarray(axis, dtype=float)
    return lambda points, normals: points @ axis > offset


def min_height(z_min, pose=None) -> Predicate:
    """Invalidate points whose world height is below z_min."""
    def pred(points, normals):
        return _to_world(points, pose)[:, 2] >= z_min
    return pred


def normal_z_above(nz_min, pose=None) -> Predicate:
    """Invalidate points whose world normal z-component is below nz_min."""
    def pred(points, normals):
        return _rotate_world(normals, pose)[:, 2] >= nz_min
    return pred


def all_of(*preds: Predicate) -> Predicate:
    def pred(points, normals):
        out = np.ones(len(points), bool)
        for p in preds:
            out &= np.asarray(p(points, normals), bool)
        return out
    return pred


def _to_world(points, pose):
    if pose is None:
        return points
    from .rotations import quat_to_matrix
    return points @ quat_to_matrix(pose.q).T + pose.p


def _rotate_world(normals, pose):
    if pose is None:
        return normals
    from .rotations import quat_to_matrix
    return normals @ quat_to_matrix(pose.q).T


def curvature_predicate(mesh: TriMesh, threshold: float) -> Predicate:
    """Reject samples on faces whose 1-ring normal variance exceeds threshold.

    The 1-ring of a face is every face sharing a vertex with it."""
    vf = mesh.vertex_faces()
    var = np.empty(len(mesh.faces))
    for f, tri in enumerate(mesh.faces):
        ring = sorted({g for v in tri for g in vf[v]})
        nr = mesh.face_normals[ring]
        var[f] = ((nr - nr.mean(axis=0)) ** 2).sum(axis=1).mean()

    def pred(points, normals):
        _, _, face = signed_distance(mesh, points)
        return var[face] <= threshold
    return pred
