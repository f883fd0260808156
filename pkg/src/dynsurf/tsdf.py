"""Ray-aware truncated signed distance fusion and isosurface extraction.

Free space is carved along each ray from its true (time-varying) emission
origin to the measured return, so a surface is only ever reconstructed
where the rays say there is one. Distances are signed along the ray:
positive in front of the hit (free space), negative behind it, truncated
on both sides. The zero level set is extracted with marching cubes,
restricted to observed voxels.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from skimage.measure import marching_cubes

from .errors import SkipObject
from .mesh import MeshProximityIndex, TriangleMesh


@dataclass
class ReconParams:
    voxel_size: float = 0.05
    truncation_voxels: float = 4.0
    min_points: int = 50
    # Sample spacing along rays, as a fraction of the voxel size.
    sample_spacing_factor: float = 0.5
    # Grids larger than this are fused in tiles to bound memory.
    max_voxels: int = 48_000_000

    @property
    def truncation(self) -> float:
        return self.voxel_size * self.truncation_voxels


@dataclass
class SdfGrid:
    origin: np.ndarray      # (3,) center of voxel (0, 0, 0)
    voxel_size: float
    dims: tuple[int, int, int]
    values: np.ndarray      # (nx, ny, nz) truncated signed distance, meters
    weights: np.ndarray     # (nx, ny, nz) accumulated observation weight

    def voxel_centers_axis(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.voxel_size * np.arange(self.dims[axis])


def _ray_box_span(origins, dirs, lo, hi):
    """Parameter range [s0, s1] where each ray is inside the box (slab test)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t_lo = (lo - origins) * inv
    t_hi = (hi - origins) * inv
    t_min = np.where(np.isnan(t_lo), -np.inf, np.minimum(t_lo, t_hi))
    t_max = np.where(np.isnan(t_hi), np.inf, np.maximum(t_lo, t_hi))
    # Rays parallel to an axis: inside the slab iff origin is between planes.
    par = dirs == 0.0
    if np.any(par):
        inside = (origins >= lo) & (origins <= hi)
        t_min = np.where(par, np.where(inside, -np.inf, np.inf), t_min)
        t_max = np.where(par, np.where(inside, np.inf, -np.inf), t_max)
    return t_min.max(axis=1), t_max.min(axis=1)


def fuse_tsdf(
    points: np.ndarray,
    ray_origins: np.ndarray,
    voxel_size: float,
    truncation: float,
    *,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
    sample_spacing: float | None = None,
    min_points: int = 50,
) -> SdfGrid:
    """Fuse rays (origin -> measured point) into a truncated SDF grid.

    Voxels in front of each hit accumulate positive free-space distance,
    voxels up to one truncation band behind it accumulate negative
    distance; every voxel keeps a weighted running average.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    org = np.asarray(ray_origins, dtype=np.float64).reshape(-1, 3)
    if len(pts) != len(org):
        raise ValueError("points and ray_origins disagree in length")
    if len(pts) < min_points:
        raise SkipObject(f"{len(pts)} points < minimum of {min_points}")
    seg = pts - org
    length = np.linalg.norm(seg, axis=1)
    ok = length > 0.0  # degenerate rays (origin == point) are skipped
    pts, org, seg, length = pts[ok], org[ok], seg[ok], length[ok]
    if len(pts) == 0:
        raise SkipObject("all rays are degenerate (origin == point)")
    dirs = seg / length[:, None]

    if bounds is None:
        pad = truncation + 2.0 * voxel_size
        lo = pts.min(axis=0) - pad
        hi = pts.max(axis=0) + pad
    else:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
    dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(np.int64) + 1, 2)
    nx, ny, nz = (int(d) for d in dims)
    n_vox = nx * ny * nz
    spacing = sample_spacing if sample_spacing is not None else 0.5 * voxel_size

    w_sum = np.zeros(n_vox)
    wd_sum = np.zeros(n_vox)

    # Half-voxel slack so splats at the box surface still reach edge voxels.
    s_enter, s_exit = _ray_box_span(org, dirs, lo - 0.5 * voxel_size, hi + 0.5 * voxel_size)
    s_start = np.maximum(s_enter, 0.0)
    s_stop = np.minimum(s_exit, length + truncation)
    usable = s_start <= s_stop
    idx_usable = np.flatnonzero(usable)

    max_samples = 6_000_000
    counts_all = np.zeros(len(pts), dtype=np.int64)
    counts_all[idx_usable] = (
        np.floor((s_stop[idx_usable] - s_start[idx_usable]) / spacing).astype(np.int64) + 1
    )
    csum = np.cumsum(counts_all)
    chunk_edges = [0]
    while chunk_edges[-1] < len(pts):
        done = chunk_edges[-1]
        target = csum[done - 1] if done else 0
        nxt = int(np.searchsorted(csum, target + max_samples, side="right"))
        chunk_edges.append(min(max(nxt, done + 1), len(pts)))

    for a, b in zip(chunk_edges[:-1], chunk_edges[1:]):
        counts = counts_all[a:b]
        total = int(counts.sum())
        if total == 0:
            continue
        rep = np.repeat(np.arange(a, b), counts)
        local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
        s = s_start[rep] + local * spacing
        pos = org[rep] + dirs[rep] * s[:, None]
        sdf = np.clip(length[rep] - s, -truncation, truncation)
        vox = np.round((pos - lo) / voxel_size).astype(np.int64)
        inside = np.all((vox >= 0) & (vox < dims), axis=1)
        vox = vox[inside]
        sdf = sdf[inside]
        lin = (vox[:, 0] * ny + vox[:, 1]) * nz + vox[:, 2]
        w_sum += np.bincount(lin, minlength=n_vox)
        wd_sum += np.bincount(lin, weights=sdf, minlength=n_vox)

    observed = w_sum > 0.0
    values = np.zeros(n_vox)
    values[observed] = wd_sum[observed] / w_sum[observed]
    return SdfGrid(
        origin=lo,
        voxel_size=float(voxel_size),
        dims=(nx, ny, nz),
        values=values.reshape(nx, ny, nz),
        weights=w_sum.reshape(nx, ny, nz),
    )


def extract_mesh(grid: SdfGrid) -> TriangleMesh:
    """Zero level set of the fused SDF; unobserved voxels produce no geometry.

    Returns an empty mesh when no sign change exists among observed voxels.
    """
    observed = grid.weights > 0.0
    vals = grid.values
    masked = vals[observed]
    if masked.size == 0 or masked.min() >= 0.0 or masked.max() <= 0.0:
        return TriangleMesh.empty()
    try:
        verts, faces, _, _ = marching_cubes(
            vals,
            level=0.0,
            spacing=(grid.voxel_size,) * 3,
            mask=observed,
            gradient_direction="ascent",
        )
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    if len(faces) == 0:
        return TriangleMesh.empty()
    mesh = TriangleMesh(verts + grid.origin, faces.astype(np.int32))
    return mesh.without_degenerate()


@dataclass
class ReconResult:
    mesh: TriangleMesh
    nn_sum: float        # summed point-to-surface distance of the inputs
    nn_mean: float
    num_points: int
    num_tiles: int = 1


def _tile_bounds(lo, hi, voxel_size, truncation, max_voxels):
    """Split [lo, hi] into core tiles small enough for the voxel budget."""
    tiles = [(lo, hi)]
    out = []
    while tiles:
        tlo, thi = tiles.pop()
        dims = np.maximum(np.ceil((thi - tlo + 2 * truncation) / voxel_size) + 1, 2)
        if dims.prod() <= max_voxels:
            out.append((tlo, thi))
            continue
        axis = int(np.argmax(thi - tlo))
        mid = 0.5 * (tlo[axis] + thi[axis])
        lo2 = tlo.copy()
        lo2[axis] = mid
        hi1 = thi.copy()
        hi1[axis] = mid
        tiles.append((tlo, hi1))
        tiles.append((lo2, thi))
    return out


def reconstruct_surface(
    points: np.ndarray, ray_origins: np.ndarray, params: ReconParams
) -> ReconResult:
    """Fuse rays into a TSDF, extract the zero isosurface, report input fit.

    Large extents are fused in tiles overlapped by one truncation band; each
    tile's mesh is cropped back to its core region so tiles never duplicate
    geometry.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    org = np.asarray(ray_origins, dtype=np.float64).reshape(-1, 3)
    if len(pts) < params.min_points:
        raise SkipObject(f"{len(pts)} points < minimum of {params.min_points}")
    trunc = params.truncation
    pad = trunc + 2.0 * params.voxel_size
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    spacing = params.sample_spacing_factor * params.voxel_size

    tiles = _tile_bounds(lo, hi, params.voxel_size, trunc, params.max_voxels)
    meshes = []
    for tlo, thi in tiles:
        grid = fuse_tsdf(
            pts,
            org,
            params.voxel_size,
            trunc,
            bounds=(tlo - trunc, thi + trunc),
            sample_spacing=spacing,
            min_points=1,
        )
        mesh = extract_mesh(grid)
        if mesh.is_empty:
            continue
        if len(tiles) > 1:
            centroids = mesh.corners().mean(axis=1)
            keep = np.all((centroids >= tlo) & (centroids < thi), axis=1)
            mesh = TriangleMesh(mesh.vertices, mesh.triangles[keep])
        if not mesh.is_empty:
            meshes.append(mesh)
    mesh = TriangleMesh.merge(meshes)
    if mesh.is_empty:
        return ReconResult(mesh, np.inf, np.inf, len(pts), len(tiles))
    dists = MeshProximityIndex(mesh).distances(pts)
    return ReconResult(mesh, float(dists.sum()), float(dists.mean()), len(pts), len(tiles))
