"""Indexed triangle meshes: distance queries, ray tests, OFF file io.

Distance and intersection queries are exact (every triangle is tested),
vectorized over query batches, and chunked to bound memory. Acceleration
for the solver hot path lives elsewhere; these queries are the geometric
ground truth used for occlusion, validation, and tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["TriangleMesh", "load_off", "save_off"]

_EPS = 1e-12
# Fixed slightly-irrational parity ray directions; a point whose ray grazes
# a triangle edge is deterministically re-cast along the next direction.
_PARITY_DIRS = [
    np.array([0.5773502691896258, 0.2672612419124244, 0.7745966692414834]),
    np.array([-0.3312945782245891, 0.8191520442889918, 0.4679298142605734]),
    np.array([0.7071067811865476, -0.5144957554275265, 0.4852686541529233]),
    np.array([0.1531181797854730, 0.6405126152203155, -0.7525209964149371]),
]
_PARITY_DIRS = [d / np.linalg.norm(d) for d in _PARITY_DIRS]


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    _tri_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must have shape (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must have shape (F, 3)")

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def triangles(self) -> np.ndarray:
        """Corner positions, shape (F, 3, 3)."""
        return self.vertices[self.faces]

    def _corners(self):
        if "corners" not in self._tri_cache:
            tri = self.triangles()
            a = tri[:, 0]
            self._tri_cache["corners"] = (a, tri[:, 1] - a, tri[:, 2] - a)
        return self._tri_cache["corners"]

    def aabb(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, pose) -> "TriangleMesh":
        return TriangleMesh(pose.transform(self.vertices), self.faces.copy())

    @classmethod
    def merged(cls, meshes) -> "TriangleMesh":
        verts, faces, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + off)
            off += m.vertices.shape[0]
        return cls(np.vstack(verts), np.vstack(faces))

    def is_watertight(self) -> bool:
        """Edge-manifold and consistently oriented: every undirected edge is
        shared by exactly two faces and every directed edge appears once."""
        if self.n_faces == 0:
            return False
        f = self.faces
        directed = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        _, dir_counts = np.unique(directed, axis=0, return_counts=True)
        if np.any(dir_counts != 1):
            return False
        undirected = np.sort(directed, axis=1)
        _, und_counts = np.unique(undirected, axis=0, return_counts=True)
        return bool(np.all(und_counts == 2))

    # -- distance ---------------------------------------------------------

    def unsigned_distance(self, points: np.ndarray, chunk: int = 128) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty(points.shape[0])
        for s in range(0, points.shape[0], chunk):
            out[s : s + chunk] = np.sqrt(self._dist2_chunk(points[s : s + chunk]))
        return out

    def _dist2_chunk(self, p: np.ndarray) -> np.ndarray:
        """Squared distance from each point to the nearest triangle.

        Closest-point-on-triangle by barycentric region classification,
        broadcast over (points, triangles).
        """
        a, ab, ac = self._corners()
        ap = p[:, None, :] - a[None, :, :]
        d1 = np.einsum("tk,ptk->pt", ab, ap)
        d2 = np.einsum("tk,ptk->pt", ac, ap)
        bp = ap - ab[None, :, :]
        d3 = np.einsum("tk,ptk->pt", ab, bp)
        d4 = np.einsum("tk,ptk->pt", ac, bp)
        cp = ap - ac[None, :, :]
        d5 = np.einsum("tk,ptk->pt", ab, cp)
        d6 = np.einsum("tk,ptk->pt", ac, cp)

        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4

        with np.errstate(divide="ignore", invalid="ignore"):
            v_ab = d1 / (d1 - d3)
            w_ac = d2 / (d2 - d6)
            w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            denom = 1.0 / (va + vb + vc)
            v_in = vb * denom
            w_in = vc * denom

        # Region selection, later writes win; start from interior.
        v = v_in
        w = w_in
        on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        v = np.where(on_bc, 1.0 - w_bc, v)
        w = np.where(on_bc, w_bc, w)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        v = np.where(on_ac, 0.0, v)
        w = np.where(on_ac, w_ac, w)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v = np.where(on_ab, v_ab, v)
        w = np.where(on_ab, 0.0, w)
        at_c = (d6 >= 0) & (d5 <= d6)
        v = np.where(at_c, 0.0, v)
        w = np.where(at_c, 1.0, w)
        at_b = (d3 >= 0) & (d4 <= d3)
        v = np.where(at_b, 1.0, v)
        w = np.where(at_b, 0.0, w)
        at_a = (d1 <= 0) & (d2 <= 0)
        v = np.where(at_a, 0.0, v)
        w = np.where(at_a, 0.0, w)

        closest = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
        diff = p[:, None, :] - closest
        return np.einsum("ptk,ptk->pt", diff, diff).min(axis=1)

    def contains(self, points: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Inside test by ray-crossing parity.

        Points whose ray passes within tolerance of a triangle edge are
        re-cast along alternate fixed directions until the crossing count
        is unambiguous.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        lo, hi = self.aabb()
        reach = float(np.linalg.norm(hi - lo)) + float(
            np.max(np.linalg.norm(points - 0.5 * (lo + hi), axis=1), initial=0.0)
        )
        inside = np.zeros(n, dtype=bool)
        pending = np.arange(n)
        for direction in _PARITY_DIRS:
            if len(pending) == 0:
                break
            pts = points[pending]
            far = pts + direction * (2.0 * reach + 1.0)
            counts = np.zeros(len(pending), dtype=np.int64)
            suspect = np.zeros(len(pending), dtype=bool)
            for s in range(0, len(pending), chunk):
                c, susp = self._parity_chunk(pts[s : s + chunk], far[s : s + chunk])
                counts[s : s + chunk] = c
                suspect[s : s + chunk] = susp
            inside[pending] = counts % 2 == 1
            pending = pending[suspect]
        return inside

    def _parity_chunk(self, p0, p1):
        """Crossing counts plus a flag for rays that graze an edge."""
        a, e1, e2 = self._corners()
        d = p1 - p0
        pvec = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("tk,stk->st", e1, pvec)
        near = np.abs(det) > _EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(near, 1.0 / det, 0.0)
        tvec = p0[:, None, :] - a[None, :, :]
        u = np.einsum("stk,stk->st", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("sk,stk->st", d, qvec) * inv
        t = np.einsum("tk,stk->st", e2, qvec) * inv
        tol = 1e-9
        in_range = near & (t > 1e-12) & (t < 1.0)
        hits = in_range & (u > tol) & (v > tol) & (u + v < 1.0 - tol)
        grazing = in_range & (u > -tol) & (v > -tol) & (u + v < 1.0 + tol) & ~(
            (u > tol) & (v > tol) & (u + v < 1.0 - tol)
        )
        return hits.sum(axis=1), grazing.any(axis=1)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance to the surface, negative inside the enclosed volume."""
        d = self.unsigned_distance(points)
        inside = self.contains(points)
        return np.where(inside, -d, d)

    # -- rays -------------------------------------------------------------

    def _mt_hits(self, p0: np.ndarray, p1: np.ndarray):
        """Segment/triangle hit mask (S, F), Moller-Trumbore."""
        a, e1, e2 = self._corners()
        d = p1 - p0
        pvec = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("tk,stk->st", e1, pvec)
        near = np.abs(det) > _EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(near, 1.0 / det, 0.0)
        tvec = p0[:, None, :] - a[None, :, :]
        u = np.einsum("stk,stk->st", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("sk,stk->st", d, qvec) * inv
        t = np.einsum("tk,stk->st", e2, qvec) * inv
        return near & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1.0 + 1e-9) & (
            t >= 1e-9
        ) & (t <= 1.0 - 1e-9)

    def _hit_counts(self, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
        return self._mt_hits(p0, p1).sum(axis=1)

    def segment_hits(self, p0: np.ndarray, p1: np.ndarray, chunk: int = 256) -> np.ndarray:
        """True where the closed segment p0 -> p1 crosses any triangle."""
        p0 = np.atleast_2d(np.asarray(p0, dtype=np.float64))
        p1 = np.atleast_2d(np.asarray(p1, dtype=np.float64))
        if p0.shape[0] == 1 and p1.shape[0] > 1:
            p0 = np.broadcast_to(p0, p1.shape).copy()
        if p1.shape[0] == 1 and p0.shape[0] > 1:
            p1 = np.broadcast_to(p1, p0.shape).copy()
        out = np.zeros(p0.shape[0], dtype=bool)
        for s in range(0, p0.shape[0], chunk):
            out[s : s + chunk] = self._mt_hits(p0[s : s + chunk], p1[s : s + chunk]).any(axis=1)
        return out


def save_off(mesh: TriangleMesh, path):
    lines = ["OFF", f"{mesh.vertices.shape[0]} {mesh.n_faces} 0"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices]
    lines += [f"3 {i} {j} {k}" for i, j, k in mesh.faces]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_off(path) -> TriangleMesh:
    with open(path) as f:
        tokens = []
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ValueError(f"{path}: not an OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    k = 4
    verts = np.array(tokens[k : k + 3 * nv], dtype=np.float64).reshape(nv, 3)
    k += 3 * nv
    faces = []
    for _ in range(nf):
        cnt = int(tokens[k])
        if cnt != 3:
            raise ValueError(f"{path}: only triangle faces are supported")
        faces.append([int(tokens[k + 1]), int(tokens[k + 2]), int(tokens[k + 3])])
        k += 4
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))
