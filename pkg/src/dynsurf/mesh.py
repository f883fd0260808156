"""Triangle meshes, exact proximity queries, and ray casting.

Proximity queries return the exact nearest point on the triangle surface
(not just the nearest vertex): a vertex k-d tree gives an upper bound on
the distance, a centroid k-d tree turns that bound into a small exact
candidate set, and the Ericson closest-point-on-triangle test decides.
Ray casting is Moller-Trumbore, either brute force over all triangles or
through a uniform-grid DDA for large meshes; both paths share epsilons so
they agree to machine precision.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .errors import DataFormatError, EmptyMeshError
from .se3 import RigidTransform

_DEGENERATE_AREA = 1e-12
_MT_DET_EPS = 1e-12
_MT_BARY_EPS = 1e-10
_MT_T_MIN = 1e-9

# Above this triangle count ray casting goes through the uniform grid.
_GRID_THRESHOLD = 1024


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float64, meters
    triangles: np.ndarray  # (T, 3) int32 vertex indices

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")

    @staticmethod
    def empty() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """Triangle corner positions, (T, 3, 3)."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        tri = self.corners()
        return 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )

    def triangle_normals(self) -> np.ndarray:
        tri = self.corners()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0.0, ln, 1.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.num_vertices == 0:
            z = np.zeros(3)
            return z, z
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, pose: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(pose.apply(self.vertices), self.triangles.copy())

    def without_degenerate(self, min_area: float = _DEGENERATE_AREA) -> "TriangleMesh":
        if self.is_empty:
            return self
        keep = self.areas() > min_area
        return TriangleMesh(self.vertices.copy(), self.triangles[keep]).compacted()

    def compacted(self) -> "TriangleMesh":
        """Drop vertices not referenced by any triangle."""
        if self.is_empty:
            return TriangleMesh.empty()
        used, inverse = np.unique(self.triangles, return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3).astype(np.int32))

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform area-weighted surface samples, (n, 3)."""
        if self.is_empty:
            raise EmptyMeshError("cannot sample an empty mesh")
        areas = self.areas()
        probs = areas / areas.sum()
        idx = rng.choice(len(areas), size=n, p=probs)
        u, v = rng.random(n), rng.random(n)
        flip = u + v > 1.0
        u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
        tri = self.corners()[idx]
        return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])

    @staticmethod
    def box(extent, center=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        """Axis-aligned cuboid surface with the given full side lengths."""
        e = np.asarray(extent, dtype=np.float64) * 0.5
        c = np.asarray(center, dtype=np.float64)
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
        )
        verts = c + signs * e
        # Two triangles per face, outward winding.
        faces = np.array(
            [
                [0, 1, 3], [0, 3, 2],  # -x
                [4, 6, 7], [4, 7, 5],  # +x
                [0, 4, 5], [0, 5, 1],  # -y
                [2, 3, 7], [2, 7, 6],  # +y
                [0, 2, 6], [0, 6, 4],  # -z
                [1, 5, 7], [1, 7, 3],  # +z
            ],
            dtype=np.int32,
        )
        return TriangleMesh(verts, faces)

    @staticmethod
    def merge(meshes: Sequence["TriangleMesh"]) -> "TriangleMesh":
        meshes = [m for m in meshes if not m.is_empty]
        if not meshes:
            return TriangleMesh.empty()
        verts = np.concatenate([m.vertices for m in meshes])
        offsets = np.cumsum([0] + [m.num_vertices for m in meshes[:-1]])
        tris = np.concatenate([m.triangles + o for m, o in zip(meshes, offsets)])
        return TriangleMesh(verts, tris)


# ---------------------------------------------------------------------------
# Closest point on triangle (Ericson), vectorized over (triangle, point) pairs
# ---------------------------------------------------------------------------

def closest_on_triangles(tri: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Closest point on each triangle to each query, elementwise.

    tri: (M, 3, 3) corner positions, q: (M, 3). Returns (M, 3).
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = b - a, c - a
    ap = q - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = q - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = q - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
    v_ab = np.nan_to_num(v_ab, nan=0.0, posinf=0.0, neginf=0.0)
    w_ac = np.nan_to_num(w_ac, nan=0.0, posinf=0.0, neginf=0.0)
    w_bc = np.nan_to_num(w_bc, nan=0.0, posinf=0.0, neginf=0.0)
    v_in = np.nan_to_num(v_in, nan=0.0, posinf=0.0, neginf=0.0)
    w_in = np.nan_to_num(w_in, nan=0.0, posinf=0.0, neginf=0.0)

    conds = [
        (d1 <= 0.0) & (d2 <= 0.0),                                  # vertex a
        (d3 >= 0.0) & (d4 <= d3),                                   # vertex b
        (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0),                    # edge ab
        (d6 >= 0.0) & (d5 <= d6),                                   # vertex c
        (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0),                    # edge ac
        (va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0),          # edge bc
    ]
    cands = [
        a,
        b,
        a + v_ab[:, None] * ab,
        c,
        a + w_ac[:, None] * ac,
        b + w_bc[:, None] * (c - b),
    ]
    interior = a + v_in[:, None] * ab + w_in[:, None] * ac
    out = interior.copy()
    decided = np.zeros(len(q), dtype=bool)
    for cond, cand in zip(conds, cands):
        pick = cond & ~decided
        out[pick] = cand[pick]
        decided |= cond
    return out


@dataclass(frozen=True)
class ClosestPoints:
    points: np.ndarray      # (N, 3) nearest point on the surface
    distances: np.ndarray   # (N,)
    triangles: np.ndarray   # (N,) triangle index
    normals: np.ndarray     # (N, 3) unit normal of that triangle


def closest_points_brute(mesh: TriangleMesh, points: np.ndarray) -> ClosestPoints:
    """Exhaustive nearest-point search over all triangles (oracle path)."""
    if mesh.is_empty:
        raise EmptyMeshError("mesh has no triangles")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.corners()
    normals = mesh.triangle_normals()
    n, t = len(pts), len(tri)
    best_d = np.full(n, np.inf)
    best_p = np.zeros((n, 3))
    best_i = np.zeros(n, dtype=np.int64)
    chunk = max(1, int(2_000_000 // max(t, 1)))
    for s in range(0, n, chunk):
        q = pts[s : s + chunk]
        m = len(q)
        tri_rep = np.broadcast_to(tri, (m, t, 3, 3)).reshape(m * t, 3, 3)
        q_rep = np.repeat(q, t, axis=0)
        cp = closest_on_triangles(tri_rep, q_rep).reshape(m, t, 3)
        d = np.linalg.norm(cp - q[:, None, :], axis=2)
        i = np.argmin(d, axis=1)
        rows = np.arange(m)
        best_d[s : s + chunk] = d[rows, i]
        best_p[s : s + chunk] = cp[rows, i]
        best_i[s : s + chunk] = i
    return ClosestPoints(best_p, best_d, best_i, normals[best_i])


class MeshProximityIndex:
    """Accelerated exact nearest-point-on-surface queries for one mesh."""

    def __init__(self, mesh: TriangleMesh):
        if mesh.is_empty:
            raise EmptyMeshError("cannot index an empty mesh")
        self.mesh = mesh
        self._tri = mesh.corners()
        self._normals = mesh.triangle_normals()
        centroids = self._tri.mean(axis=1)
        self._radius_max = float(
            np.linalg.norm(self._tri - centroids[:, None, :], axis=2).max()
        )
        # Orphan vertices would break the upper bound; index referenced ones.
        self._vertex_tree = cKDTree(mesh.vertices[np.unique(mesh.triangles)])
        self._centroid_tree = cKDTree(centroids)

    def query(self, points: np.ndarray) -> ClosestPoints:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            e = np.zeros((0, 3))
            return ClosestPoints(e, np.zeros(0), np.zeros(0, dtype=np.int64), e)
        upper, _ = self._vertex_tree.query(pts, k=1, workers=-1)
        # Any triangle that could beat the vertex bound has its centroid
        # within upper + max circumradius of the query.
        radii = upper + self._radius_max + 1e-12
        cand = self._centroid_tree.query_ball_point(pts, radii, workers=-1, return_sorted=False)
        counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(pts))
        empty = counts == 0
        if np.any(empty):
            # Roundoff insurance: widen to the nearest centroid plus slack.
            d1, _ = self._centroid_tree.query(pts[empty], k=1, workers=-1)
            wider = self._centroid_tree.query_ball_point(
                pts[empty], d1 + 2.0 * self._radius_max + 1e-9, workers=-1, return_sorted=False
            )
            for where, lst in zip(np.flatnonzero(empty), wider):
                cand[where] = lst
            counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(pts))
        flat = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand]) if counts.sum() else np.zeros(0, dtype=np.int64)
        seg = np.repeat(np.arange(len(pts)), counts)
        cp = closest_on_triangles(self._tri[flat], pts[seg])
        d = np.linalg.norm(cp - pts[seg], axis=1)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        dmin = np.minimum.reduceat(d, starts)
        # First candidate achieving the per-segment minimum.
        hit = d <= dmin[seg]
        pos = np.flatnonzero(hit)
        seg_hit = seg[pos]
        _, first = np.unique(seg_hit, return_index=True)
        sel = pos[first]
        tri_idx = flat[sel]
        return ClosestPoints(cp[sel], d[sel], tri_idx, self._normals[tri_idx])

    def distances(self, points: np.ndarray) -> np.ndarray:
        return self.query(points).distances


def nn_distance(index: MeshProximityIndex, points: np.ndarray) -> float:
    """Sum over points of the exact distance to the mesh surface."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("nn_distance needs a non-empty point set")
    return float(index.distances(pts).sum())


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RayHit:
    point: np.ndarray
    distance: float
    mesh_index: int
    triangle_index: int


def cast_rays_brute(
    mesh: TriangleMesh, origins: np.ndarray, dirs: np.ndarray, tmax: float = np.inf
) -> tuple[np.ndarray, np.ndarray]:
    """Moller-Trumbore over all (ray, triangle) pairs.

    Returns (t, triangle_index); misses have t = inf and index -1.
    Directions must be unit length for t to be in meters.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    if mesh.is_empty or n == 0:
        return best_t, best_i
    tri = mesh.corners()
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    t_count = len(tri)
    chunk = max(1, int(4_000_000 // max(t_count, 1)))
    for s in range(0, n, chunk):
        o = origins[s : s + chunk]
        d = dirs[s : s + chunk]
        h = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("tj,rtj->rt", e1, h)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            sv = o[:, None, :] - v0[None, :, :]
            u = inv * np.einsum("rtj,rtj->rt", sv, h)
            qv = np.cross(sv, e1[None, :, :])
            v = inv * np.einsum("rj,rtj->rt", d, qv)
            t = inv * np.einsum("tj,rtj->rt", e2, qv)
        valid = (
            (np.abs(det) > _MT_DET_EPS)
            & (u >= -_MT_BARY_EPS)
            & (v >= -_MT_BARY_EPS)
            & (u + v <= 1.0 + _MT_BARY_EPS)
            & (t > _MT_T_MIN)
            & (t <= tmax)
        )
        t = np.where(valid, t, np.inf)
        i = np.argmin(t, axis=1)
        rows = np.arange(len(o))
        tm = t[rows, i]
        best_t[s : s + chunk] = tm
        best_i[s : s + chunk] = np.where(np.isfinite(tm), i, -1)
    return best_t, best_i


@njit(cache=True)
def _mt_one(ox, oy, oz, dx, dy, dz, ax, ay, az, e1x, e1y, e1z, e2x, e2y, e2z):
    hx = dy * e2z - dz * e2y
    hy = dz * e2x - dx * e2z
    hz = dx * e2y - dy * e2x
    det = e1x * hx + e1y * hy + e1z * hz
    if abs(det) <= _MT_DET_EPS:
        return np.inf
    inv = 1.0 / det
    sx, sy, sz = ox - ax, oy - ay, oz - az
    u = inv * (sx * hx + sy * hy + sz * hz)
    if u < -_MT_BARY_EPS or u > 1.0 + _MT_BARY_EPS:
        return np.inf
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = inv * (dx * qx + dy * qy + dz * qz)
    if v < -_MT_BARY_EPS or u + v > 1.0 + _MT_BARY_EPS:
        return np.inf
    t = inv * (e2x * qx + e2y * qy + e2z * qz)
    if t <= _MT_T_MIN:
        return np.inf
    return t


@njit(cache=True)
def _grid_cast(
    origins, dirs, tmax, gmin, cell, dims, starts, cell_tris, v0, e1, e2, out_t, out_i
):
    nx, ny, nz = dims[0], dims[1], dims[2]
    for i in range(origins.shape[0]):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        t_enter = 0.0
        t_exit = tmax
        ok = True
        for a in range(3):
            o = origins[i, a]
            d = dirs[i, a]
            lo = gmin[a]
            hi = gmin[a] + cell * dims[a]
            if abs(d) < 1e-300:
                if o < lo or o > hi:
                    ok = False
                    break
            else:
                ta = (lo - o) / d
                tb = (hi - o) / d
                if ta > tb:
                    ta, tb = tb, ta
                if ta > t_enter:
                    t_enter = ta
                if tb < t_exit:
                    t_exit = tb
        if not ok or t_enter > t_exit:
            out_t[i] = np.inf
            out_i[i] = -1
            continue
        eps = 1e-12 * (1.0 + abs(t_enter))
        px = ox + dx * (t_enter + eps)
        py = oy + dy * (t_enter + eps)
        pz = oz + dz * (t_enter + eps)
        ix = int((px - gmin[0]) / cell)
        iy = int((py - gmin[1]) / cell)
        iz = int((pz - gmin[2]) / cell)
        if ix < 0:
            ix = 0
        if iy < 0:
            iy = 0
        if iz < 0:
            iz = 0
        if ix > nx - 1:
            ix = nx - 1
        if iy > ny - 1:
            iy = ny - 1
        if iz > nz - 1:
            iz = nz - 1
        step_x = 1 if dx > 0.0 else -1
        step_y = 1 if dy > 0.0 else -1
        step_z = 1 if dz > 0.0 else -1
        td_x = abs(cell / dx) if dx != 0.0 else np.inf
        td_y = abs(cell / dy) if dy != 0.0 else np.inf
        td_z = abs(cell / dz) if dz != 0.0 else np.inf
        if dx > 0.0:
            tn_x = t_enter + (gmin[0] + (ix + 1) * cell - px) / dx
        elif dx < 0.0:
            tn_x = t_enter + (gmin[0] + ix * cell - px) / dx
        else:
            tn_x = np.inf
        if dy > 0.0:
            tn_y = t_enter + (gmin[1] + (iy + 1) * cell - py) / dy
        elif dy < 0.0:
            tn_y = t_enter + (gmin[1] + iy * cell - py) / dy
        else:
            tn_y = np.inf
        if dz > 0.0:
            tn_z = t_enter + (gmin[2] + (iz + 1) * cell - pz) / dz
        elif dz < 0.0:
            tn_z = t_enter + (gmin[2] + iz * cell - pz) / dz
        else:
            tn_z = np.inf
        best_t = np.inf
        best_tri = -1
        while True:
            c = (ix * ny + iy) * nz + iz
            for k in range(starts[c], starts[c + 1]):
                tri = cell_tris[k]
                t = _mt_one(
                    ox, oy, oz, dx, dy, dz,
                    v0[tri, 0], v0[tri, 1], v0[tri, 2],
                    e1[tri, 0], e1[tri, 1], e1[tri, 2],
                    e2[tri, 0], e2[tri, 1], e2[tri, 2],
                )
                if t < best_t and t <= tmax:
                    best_t = t
                    best_tri = tri
            t_cell_exit = min(tn_x, min(tn_y, tn_z))
            # Hits in later cells can only occur at t >= the cell exit time.
            if best_t <= t_cell_exit + 1e-12 or t_cell_exit > t_exit + 1e-9:
                break
            if tn_x <= tn_y and tn_x <= tn_z:
                ix += step_x
                tn_x += td_x
                if ix < 0 or ix >= nx:
                    break
            elif tn_y <= tn_z:
                iy += step_y
                tn_y += td_y
                if iy < 0 or iy >= ny:
                    break
            else:
                iz += step_z
                tn_z += td_z
                if iz < 0 or iz >= nz:
                    break
        out_t[i] = best_t
        out_i[i] = best_tri


class RayCaster:
    """Nearest-hit ray queries against one mesh, grid-accelerated when large."""

    def __init__(self, mesh: TriangleMesh, use_grid: Optional[bool] = None):
        self.mesh = mesh
        if use_grid is None:
            use_grid = mesh.num_triangles > _GRID_THRESHOLD
        self._grid = None
        if use_grid and not mesh.is_empty:
            self._build_grid()
        if not mesh.is_empty:
            tri = mesh.corners()
            self._v0 = np.ascontiguousarray(tri[:, 0])
            self._e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
            self._e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])

    def _build_grid(self):
        mesh = self.mesh
        tri = mesh.corners()
        vmin, vmax = mesh.bounds()
        ext = np.maximum(vmax - vmin, 1e-9)
        n_target = int(np.clip(np.cbrt(2.0 * mesh.num_triangles), 4, 160))
        cell = float(ext.max()) / n_target
        pad = 1e-9 + 1e-12 * float(ext.max())
        gmin = vmin - pad
        dims = np.maximum(np.ceil((vmax - gmin + pad) / cell).astype(np.int64), 1)
        lo = np.clip(np.floor((tri.min(axis=1) - gmin) / cell).astype(np.int64), 0, dims - 1)
        hi = np.clip(np.floor((tri.max(axis=1) - gmin) / cell).astype(np.int64), 0, dims - 1)
        spans = hi - lo + 1
        counts = spans.prod(axis=1)
        total = int(counts.sum())
        tri_ids = np.repeat(np.arange(mesh.num_triangles, dtype=np.int64), counts)
        offs = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
        sp = spans[tri_ids]
        dz = offs % sp[:, 2]
        rem = offs // sp[:, 2]
        dy = rem % sp[:, 1]
        dx = rem // sp[:, 1]
        cx = lo[tri_ids, 0] + dx
        cy = lo[tri_ids, 1] + dy
        cz = lo[tri_ids, 2] + dz
        lin = (cx * dims[1] + cy) * dims[2] + cz
        order = np.argsort(lin, kind="stable")
        n_cells = int(dims.prod())
        starts = np.zeros(n_cells + 1, dtype=np.int64)
        np.cumsum(np.bincount(lin, minlength=n_cells), out=starts[1:])
        self._grid = (
            gmin.astype(np.float64),
            float(cell),
            dims.astype(np.int64),
            starts,
            np.ascontiguousarray(tri_ids[order]),
        )

    def cast(
        self, origins: np.ndarray, dirs: np.ndarray, tmax: float = np.inf
    ) -> tuple[np.ndarray, np.ndarray]:
        """Nearest hit per ray: returns (t, triangle index), inf/-1 on miss."""
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        if self.mesh.is_empty or len(origins) == 0:
            return np.full(len(origins), np.inf), np.full(len(origins), -1, dtype=np.int64)
        if self._grid is None:
            return cast_rays_brute(self.mesh, origins, dirs, tmax)
        gmin, cell, dims, starts, cell_tris = self._grid
        out_t = np.empty(len(origins))
        out_i = np.empty(len(origins), dtype=np.int64)
        _grid_cast(
            origins, dirs, float(tmax), gmin, cell, dims, starts, cell_tris,
            self._v0, self._e1, self._e2, out_t, out_i,
        )
        return out_t, out_i


def ray_mesh_intersect(
    posed_meshes: Sequence[tuple[TriangleMesh, RigidTransform]],
    origin,
    direction,
    tmax: float = np.inf,
) -> Optional[RayHit]:
    """Nearest intersection of one ray with a set of posed meshes.

    Poses map mesh coordinates into the query frame. The direction is
    normalized, so the returned distance is in meters. Returns None on miss.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        raise ValueError("ray direction must be nonzero")
    direction = direction / norm
    best = None
    for mi, (mesh, pose) in enumerate(posed_meshes):
        if mesh.is_empty:
            continue
        inv = pose.invert()
        o_local = inv.apply(origin)
        d_local = inv.rotation @ direction
        t, tri = cast_rays_brute(mesh, o_local[None], d_local[None], tmax)
        if np.isfinite(t[0]) and (best is None or t[0] < best.distance):
            best = RayHit(origin + t[0] * direction, float(t[0]), mi, int(tri[0]))
    return best


# ---------------------------------------------------------------------------
# STL / OBJ
# ---------------------------------------------------------------------------

_STL_RECORD = np.dtype(
    [("normal", "<f4", 3), ("vertices", "<f4", (3, 3)), ("attr", "<u2")]
)


def save_stl(mesh: TriangleMesh, path) -> bytes:
    """Serialize to binary STL bytes and write them to path (None to skip)."""
    header = b"dynsurf binary stl" + b"\0" * 62
    tri = mesh.corners().astype(np.float32)
    rec = np.zeros(mesh.num_triangles, dtype=_STL_RECORD)
    rec["normal"] = mesh.triangle_normals().astype(np.float32)
    rec["vertices"] = tri
    blob = header + struct.pack("<I", mesh.num_triangles) + rec.tobytes()
    if path is not None:
        from .dataio import atomic_write_bytes

        atomic_write_bytes(path, blob)
    return blob


def load_stl(path) -> TriangleMesh:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 84:
        raise DataFormatError(path, len(data), "binary STL header of 84 bytes")
    count = struct.unpack("<I", data[80:84])[0]
    expected = 84 + count * _STL_RECORD.itemsize
    if len(data) < expected:
        raise DataFormatError(path, len(data), f"{expected} bytes for {count} triangles")
    rec = np.frombuffer(data[84:expected], dtype=_STL_RECORD)
    corners = rec["vertices"].astype(np.float64).reshape(-1, 3)
    if len(corners) == 0:
        return TriangleMesh.empty()
    verts, inverse = np.unique(corners, axis=0, return_inverse=True)
    tris = inverse.reshape(-1, 3).astype(np.int32)
    return TriangleMesh(verts, tris).without_degenerate()


def save_obj(mesh: TriangleMesh, path) -> str:
    lines = ["# dynsurf mesh"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        from .dataio import atomic_write_text

        atomic_write_text(path, text)
    return text
