"""Procedural scene objects: faceted meshes plus analytic distance twins.

Every shape is described by a handful of dimensions and built two ways
from the same description: an indexed triangle mesh (rendering, ray
occlusion, exact distance queries) and an analytic signed-distance solid
(fast contact resolution and feasibility filtering). Cavity-facing radii
of the analytic solid are shrunk by cos(pi / segments) so the analytic
material region contains the faceted mesh material; a particle resting on
the analytic surface therefore never penetrates the mesh.

Revolved shapes are defined by a closed polyline cross-section in the
(radius, axial) half plane, traversed counterclockwise. Axis-touching
profiles must start and end at radius zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import TriangleMesh

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


__all__ = ["AnalyticSolid", "ShapeBundle", "build_shape"]

_AXIS_PERM = {"z": (0, 1, 2), "x": (2, 1, 0), "y": (0, 2, 1)}


# ---------------------------------------------------------------------------
# Analytic solids


class AnalyticSolid:
    """Signed distance to a solid region; negative inside the material."""

    def sdf(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, points: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        """Unit outward gradient by central differences."""
        g = np.empty_like(points, dtype=np.float64)
        for k in range(3):
            d = np.zeros(3)
            d[k] = eps
            g[:, k] = self.sdf(points + d) - self.sdf(points - d)
        norm = np.linalg.norm(g, axis=1)
        norm[norm == 0.0] = 1.0
        return g / norm[:, None]


@njit(cache=True)
def _polygon_sdf(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Signed distance from 2D points to a simple closed polygon.

    Distance to the nearest edge, negative where the even-odd crossing
    parity says the point is enclosed.
    """
    n_pts = pts.shape[0]
    n_poly = poly.shape[0]
    out = np.empty(n_pts)
    for p in range(n_pts):
        px, py = pts[p, 0], pts[p, 1]
        best = np.inf
        inside = False
        for e in range(n_poly):
            ax, ay = poly[e, 0], poly[e, 1]
            bx, by = poly[(e + 1) % n_poly, 0], poly[(e + 1) % n_poly, 1]
            ex, ey = bx - ax, by - ay
            wx, wy = px - ax, py - ay
            ee = ex * ex + ey * ey
            t = 0.0
            if ee > 0.0:
                t = (wx * ex + wy * ey) / ee
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            dx = wx - t * ex
            dy = wy - t * ey
            d2 = dx * dx + dy * dy
            if d2 < best:
                best = d2
            if (ay <= py) != (by <= py):
                xint = ax + (py - ay) * (bx - ax) / (by - ay)
                if px < xint:
                    inside = not inside
        out[p] = -np.sqrt(best) if inside else np.sqrt(best)
    return out


class RevolvedSolid(AnalyticSolid):
    """Solid of revolution of a cross-section polygon about a world axis."""

    def __init__(self, profile, axis: str = "z"):
        profile = np.asarray(profile, dtype=np.float64)
        if np.any(profile[:, 0] < -1e-12):
            raise ValueError("profile radii must be non-negative")
        touches = profile[:, 0] < 1e-12
        if np.any(touches):
            if not (touches[0] and touches[-1]):
                raise ValueError("axis-touching profiles must start and end on the axis")
            mirror = profile[1:-1][::-1] * np.array([-1.0, 1.0])
            self.poly = np.vstack([profile, mirror])
        else:
            self.poly = profile
        self.perm = _AXIS_PERM[axis]

    def sdf(self, points):
        p = np.atleast_2d(points)[:, self.perm]
        rz = np.column_stack([np.hypot(p[:, 0], p[:, 1]), p[:, 2]])
        return _polygon_sdf(rz, self.poly)


class BoxSolid(AnalyticSolid):
    def __init__(self, half_extents, center=(0.0, 0.0, 0.0)):
        self.half = np.asarray(half_extents, dtype=np.float64)
        self.center = np.asarray(center, dtype=np.float64)

    def sdf(self, points):
        q = np.abs(np.atleast_2d(points) - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside


class UnionSolid(AnalyticSolid):
    def __init__(self, parts):
        self.parts = list(parts)

    def sdf(self, points):
        return np.min([p.sdf(points) for p in self.parts], axis=0)


class DifferenceSolid(AnalyticSolid):
    """Material of `base` with the volume of `cut` removed."""

    def __init__(self, base, cut):
        self.base = base
        self.cut = cut

    def sdf(self, points):
        return np.maximum(self.base.sdf(points), -self.cut.sdf(points))


# ---------------------------------------------------------------------------
# Revolved meshes


def _ccw(profile: np.ndarray) -> np.ndarray:
    a = profile
    b = np.roll(profile, -1, axis=0)
    area2 = np.sum(a[:, 0] * b[:, 1] - b[:, 0] * a[:, 1])
    return profile if area2 > 0 else profile[::-1]


def revolve_mesh(profile, segments: int = 24, axis: str = "z") -> TriangleMesh:
    """Watertight mesh of the revolved cross-section polygon."""
    profile = _ccw(np.asarray(profile, dtype=np.float64))
    npts = profile.shape[0]
    theta = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    vertex_rows = []  # per profile point: array of vertex ids
    verts = []
    for r, z in profile:
        if r < 1e-12:
            vertex_rows.append(np.array([len(verts)]))
            verts.append((0.0, 0.0, z))
        else:
            ids = np.arange(len(verts), len(verts) + segments)
            vertex_rows.append(ids)
            verts.extend(zip(r * cos_t, r * sin_t, np.full(segments, z)))

    faces = []
    nxt = (np.arange(segments) + 1) % segments
    for e in range(npts):
        row0 = vertex_rows[e]
        row1 = vertex_rows[(e + 1) % npts]
        if len(row0) == 1 and len(row1) == 1:
            continue  # edge along the axis, no surface
        if len(row0) == 1:  # fan from a pole up to a ring
            for s in range(segments):
                faces.append((row0[0], row1[s], row1[nxt[s]]))
        elif len(row1) == 1:  # ring down to a pole
            for s in range(segments):
                faces.append((row1[0], row0[nxt[s]], row0[s]))
        else:
            for s in range(segments):
                faces.append((row0[s], row1[s], row1[nxt[s]]))
                faces.append((row0[s], row1[nxt[s]], row0[nxt[s]]))

    mesh = TriangleMesh(np.asarray(verts, dtype=np.float64), np.asarray(faces))
    perm = _AXIS_PERM[axis]
    if perm != (0, 1, 2):
        mesh = TriangleMesh(mesh.vertices[:, np.argsort(perm)], mesh.faces)
        if axis == "x":  # axis swap mirrors; flip winding to restore orientation
            mesh = TriangleMesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


# ---------------------------------------------------------------------------
# Shape catalogue


@dataclass
class ShapeBundle:
    mesh: TriangleMesh
    solid: AnalyticSolid
    watertight: bool
    meta: dict = field(default_factory=dict)


def _container_profiles(inner_radius, height, wall, bottom, inset):
    outer_r = inner_radius + wall
    mesh_prof = [
        (0.0, 0.0),
        (outer_r, 0.0),
        (outer_r, height),
        (inner_radius, height),
        (inner_radius, bottom),
        (0.0, bottom),
    ]
    solid_prof = [
        (0.0, 0.0),
        (outer_r, 0.0),
        (outer_r, height),
        (inner_radius * inset, height),
        (inner_radius * inset, bottom),
        (0.0, bottom),
    ]
    return mesh_prof, solid_prof


def make_open_container(
    inner_radius: float,
    height: float,
    wall: float = 0.003,
    bottom: float = 0.004,
    segments: int = 24,
) -> ShapeBundle:
    """Open-top cylindrical vessel: cups, pans, bowls."""
    inset = np.cos(np.pi / segments)
    mesh_prof, solid_prof = _container_profiles(inner_radius, height, wall, bottom, inset)
    r_int = inner_radius * inset
    return ShapeBundle(
        mesh=revolve_mesh(mesh_prof, segments),
        solid=RevolvedSolid(solid_prof),
        watertight=True,
        meta={
            "floor_z": bottom,
            "rim_z": height,
            "interior_height": height - bottom,
            "interior_profile": [(bottom, r_int), (height, r_int)],
            "interior_volume": np.pi * r_int**2 * (height - bottom),
        },
    )


def make_bottle(
    body_radius: float,
    body_height: float,
    neck_radius: float,
    neck_height: float,
    shoulder_height: float,
    wall: float = 0.003,
    bottom: float = 0.004,
    segments: int = 24,
) -> ShapeBundle:
    """Tall vessel with a conical shoulder narrowing to an open neck."""
    inset = np.cos(np.pi / segments)
    top = body_height + shoulder_height + neck_height

    def profile(inner_scale):
        ri_body = body_radius * inner_scale
        ri_neck = neck_radius * inner_scale
        return [
            (0.0, 0.0),
            (body_radius + wall, 0.0),
            (body_radius + wall, body_height),
            (neck_radius + wall, body_height + shoulder_height),
            (neck_radius + wall, top),
            (ri_neck, top),
            (ri_neck, body_height + shoulder_height),
            (ri_body, body_height),
            (ri_body, bottom),
            (0.0, bottom),
        ]

    r_int = body_radius * inset
    rn_int = neck_radius * inset
    interior_profile = [
        (bottom, r_int),
        (body_height, r_int),
        (body_height + shoulder_height, rn_int),
        (top, rn_int),
    ]
    body_vol = np.pi * r_int**2 * (body_height - bottom)
    shoulder_vol = (
        np.pi * shoulder_height / 3.0 * (r_int**2 + r_int * rn_int + rn_int**2)
    )
    neck_vol = np.pi * rn_int**2 * neck_height
    return ShapeBundle(
        mesh=revolve_mesh(profile(1.0), segments),
        solid=RevolvedSolid(profile(inset)),
        watertight=True,
        meta={
            "floor_z": bottom,
            "rim_z": top,
            "interior_height": top - bottom,
            "interior_profile": interior_profile,
            "interior_volume": body_vol + shoulder_vol + neck_vol,
        },
    )


def make_box(half_extents, segments: int = 0) -> ShapeBundle:
    """Axis-aligned solid box centered on the origin of its own frame."""
    hx, hy, hz = (float(v) for v in half_extents)
    corners = np.array(
        [
            [sx * hx, sy * hy, sz * hz]
            for sx in (-1, 1)
            for sy in (-1, 1)
            for sz in (-1, 1)
        ]
    )
    # 12 triangles, outward winding.
    faces = np.array(
        [
            (0, 1, 3), (0, 3, 2),  # -x
            (4, 6, 7), (4, 7, 5),  # +x
            (0, 4, 5), (0, 5, 1),  # -y
            (2, 3, 7), (2, 7, 6),  # +y
            (0, 2, 6), (0, 6, 4),  # -z
            (1, 5, 7), (1, 7, 3),  # +z
        ]
    )
    return ShapeBundle(
        mesh=TriangleMesh(corners, faces),
        solid=BoxSolid((hx, hy, hz)),
        watertight=True,
        meta={},
    )


def make_pipe_junction(
    bore_radius: float = 0.016,
    wall: float = 0.004,
    arm_length: float = 0.17,
    stem_bore: float = 0.014,
    stem_height: float = 0.10,
    funnel_radius: float = 0.040,
    funnel_height: float = 0.035,
    blockage: str = "open",
    occluder_offset: float = 0.045,
    occluder_open_area: float = 0.5,
    segments: int = 24,
) -> ShapeBundle:
    """Inverted T junction: horizontal crossbar fed by a vertical stem.

    The object frame origin sits on the crossbar axis at the junction
    center; the crossbar runs along x and the stem rises along +z into a
    conical funnel. A blockage places an occluder disc inside one arm:
    "partial_*" keeps a centered orifice with `occluder_open_area` of the
    bore cross-section, "blocked_*" seals the arm completely.
    """
    if blockage not in ("open", "partial_left", "blocked_left", "partial_right", "blocked_right"):
        raise ValueError(f"unknown blockage configuration {blockage!r}")
    inset = np.cos(np.pi / segments)
    outer = bore_radius + wall
    stem_outer = stem_bore + wall
    half_len = arm_length

    meshes = []
    solids = []

    # Crossbar: open-ended annular tube along x.
    tube_prof = [
        (bore_radius, -half_len),
        (outer, -half_len),
        (outer, half_len),
        (bore_radius, half_len),
    ]
    tube_solid_prof = [
        (bore_radius * inset, -half_len),
        (outer, -half_len),
        (outer, half_len),
        (bore_radius * inset, half_len),
    ]
    meshes.append(revolve_mesh(tube_prof, segments, axis="x"))
    # Inlet hole: the stem bore region above the crossbar axis.
    hole = RevolvedSolid([(0.0, 0.0), (stem_bore, 0.0), (stem_bore, outer + 1e-3), (0.0, outer + 1e-3)])
    solids.append(DifferenceSolid(RevolvedSolid(tube_solid_prof, axis="x"), hole))

    # Stem: annular tube along z from inside the crossbar up to the funnel.
    stem_base = bore_radius - wall
    stem_top = outer + stem_height
    stem_prof = [
        (stem_bore, stem_base),
        (stem_outer, stem_base),
        (stem_outer, stem_top),
        (stem_bore, stem_top),
    ]
    stem_solid_prof = [
        (stem_bore * inset, stem_base),
        (stem_outer, stem_base),
        (stem_outer, stem_top),
        (stem_bore * inset, stem_top),
    ]
    meshes.append(revolve_mesh(stem_prof, segments))
    solids.append(RevolvedSolid(stem_solid_prof))

    # Funnel: conical collar widening from the stem mouth.
    f_top = stem_top + funnel_height
    funnel_prof = [
        (stem_bore, stem_top),
        (stem_outer, stem_top),
        (funnel_radius + wall, f_top),
        (funnel_radius, f_top),
    ]
    funnel_solid_prof = [
        (stem_bore * inset, stem_top),
        (stem_outer, stem_top),
        (funnel_radius + wall, f_top),
        (funnel_radius * inset, f_top),
    ]
    meshes.append(revolve_mesh(funnel_prof, segments))
    solids.append(RevolvedSolid(funnel_solid_prof))

    occ_thickness = 0.004
    if blockage != "open":
        side = 1.0 if blockage.endswith("right") else -1.0
        x0 = side * occluder_offset - 0.5 * occ_thickness
        x1 = x0 + occ_thickness
        if blockage.startswith("partial"):
            hole_r = bore_radius * np.sqrt(1.0 - occluder_open_area)
            occ_prof = [(hole_r, x0), (bore_radius, x0), (bore_radius, x1), (hole_r, x1)]
            occ_solid_prof = [
                (hole_r * inset, x0),
                (bore_radius / inset, x0),
                (bore_radius / inset, x1),
                (hole_r * inset, x1),
            ]
        else:
            occ_prof = [(0.0, x0), (bore_radius, x0), (bore_radius, x1), (0.0, x1)]
            occ_solid_prof = [
                (0.0, x0),
                (bore_radius / inset, x0),
                (bore_radius / inset, x1),
                (0.0, x1),
            ]
        meshes.append(revolve_mesh(occ_prof, segments, axis="x"))
        solids.append(RevolvedSolid(occ_solid_prof, axis="x"))

    return ShapeBundle(
        mesh=TriangleMesh.merged(meshes),
        solid=UnionSolid(solids),
        watertight=False,
        meta={
            "stem_top": stem_top,
            "funnel_top": f_top,
            "funnel_radius": funnel_radius,
            "arm_length": arm_length,
            "bore_radius": bore_radius,
            "outlet_x": half_len,
        },
    )


_BUILDERS = {
    "open_container": make_open_container,
    "bottle": make_bottle,
    "box": make_box,
    "pipe_junction": make_pipe_junction,
}


def build_shape(kind: str, params: dict) -> ShapeBundle:
    if kind not in _BUILDERS:
        raise ValueError(f"unknown shape kind {kind!r}")
    return _BUILDERS[kind](**params)
