"""Robust point-to-plane registration against a fixed reconstructed mesh.

Gauss-Newton on the point-to-plane linearization with Huber reweighting
(IRLS). Correspondences are nearest points on the mesh surface within the
matching threshold; residuals are measured along the matched triangle's
normal. A step-halving guard keeps the robust objective non-increasing
between iterations, and the 6x6 normal matrix's condition number flags
in-plane-ambiguous (low texture) registrations.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergedRegistration, SkipObject
from .mesh import MeshProximityIndex
from .se3 import RigidTransform, exp_rotation
from .sweeps import canonicalize_object_points, ego_world_points
from .trajectory import BodyTrajectory

MIN_REGISTRATION_POINTS = 50
_DEGENERATE_COND = 1e6


@dataclass
class IcpParams:
    huber_k: float = 0.2             # meters
    match_threshold: float = 1.5     # meters
    max_iterations: int = 30
    convergence_eps: float = 1e-4    # meters of pose update

    def __post_init__(self):
        if min(self.huber_k, self.match_threshold, self.max_iterations, self.convergence_eps) <= 0:
            raise ValueError("all ICP parameters must be positive")


@dataclass
class RegistrationResult:
    pose: RigidTransform
    mean_residual: float     # mean |point-to-plane residual| over inliers
    inlier_count: int
    converged: bool
    degenerate: bool = False  # in-plane-ambiguous solution (condition check)
    iterations: int = 0


def _huber_objective(r: np.ndarray, k: float) -> float:
    a = np.abs(r)
    quad = a <= k
    return float(np.where(quad, 0.5 * r * r, k * (a - 0.5 * k)).sum())


def _residuals(index: MeshProximityIndex, pts: np.ndarray, threshold: float):
    cp = index.query(pts)
    inlier = cp.distances <= threshold
    r = np.einsum("ij,ij->i", cp.normals[inlier], pts[inlier] - cp.points[inlier])
    return r, cp.normals[inlier], cp.points[inlier], inlier


def icp_point_to_plane(
    index: MeshProximityIndex,
    points: np.ndarray,
    init: RigidTransform | None = None,
    params: IcpParams | None = None,
) -> RegistrationResult:
    """Find the pose minimizing the robust point-to-plane error to the mesh.

    The returned pose maps input points onto the mesh. Raises SkipObject
    below the minimum point count and DivergedRegistration when no point
    matches within the threshold.
    """
    params = params or IcpParams()
    pose = init or RigidTransform.identity()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < MIN_REGISTRATION_POINTS:
        raise SkipObject(f"{len(pts)} points < {MIN_REGISTRATION_POINTS}")

    degenerate = False
    converged = False
    it = 0
    mean_residual = np.inf
    inlier_count = 0
    for it in range(1, params.max_iterations + 1):
        moved = pose.apply(pts)
        r, normals, surf_pts, inlier = _residuals(index, moved, params.match_threshold)
        inlier_count = int(inlier.sum())
        if inlier_count == 0:
            raise DivergedRegistration("no correspondences within the matching threshold")
        mean_residual = float(np.abs(r).mean())
        obj = _huber_objective(r, params.huber_k)

        a = np.abs(r)
        w = np.where(a <= params.huber_k, 1.0, params.huber_k / np.maximum(a, 1e-300))
        x = moved[inlier]
        j = np.concatenate([np.cross(x, normals), normals], axis=1)  # (M, 6)
        jw = j * w[:, None]
        h = j.T @ jw
        g = jw.T @ r
        cond = np.linalg.cond(h)
        if cond > _DEGENERATE_COND:
            degenerate = True
        try:
            delta = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(h, -g, rcond=None)[0]

        # The robust objective must never increase between iterations.
        radius = float(np.linalg.norm(x - x.mean(axis=0), axis=1).max()) if len(x) else 1.0
        improved = False
        for _ in range(8):
            step = RigidTransform(exp_rotation(delta[:3]), delta[3:])
            cand = step.compose(pose)
            cand_moved = cand.apply(pts)
            r2, _, _, inl2 = _residuals(index, cand_moved, params.match_threshold)
            if inl2.sum() and _huber_objective(r2, params.huber_k) <= obj + 1e-15:
                improved = True
                break
            delta = delta * 0.5
        if not improved:
            converged = True
            break
        pose = cand
        update = float(np.linalg.norm(delta[3:]) + np.linalg.norm(delta[:3]) * radius)
        if update < params.convergence_eps:
            converged = True
            break

    moved = pose.apply(pts)
    r, _, _, inlier = _residuals(index, moved, params.match_threshold)
    if inlier.sum() == 0:
        raise DivergedRegistration("no correspondences within the matching threshold")
    return RegistrationResult(
        pose=pose,
        mean_residual=float(np.abs(r).mean()),
        inlier_count=int(inlier.sum()),
        converged=converged and not degenerate,
        degenerate=degenerate,
        iterations=it,
    )


def register_object_keyframe(
    index: MeshProximityIndex,
    points: np.ndarray,
    times: np.ndarray,
    ego: BodyTrajectory,
    obj: BodyTrajectory,
    keyframe_time: float,
    params: IcpParams | None = None,
    *,
    deskew: bool = True,
) -> tuple[RigidTransform, RegistrationResult]:
    """One pose-step update of the object keyframe that closes this sweep.

    The sweep's points are canonicalized with the current trajectories
    (holding the inter-keyframe twist fixed), registered against the
    object's mesh, and the rigid correction is applied to the keyframe's
    world pose. Returns the updated object-to-world keyframe pose.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    # Ablation baseline: evaluate the object pose at the keyframe for every
    # point, ignoring its motion within the sweep (ego deskew stays on).
    object_times = None if deskew else np.full_like(times, keyframe_time)
    canon = canonicalize_object_points(points, times, ego, obj, object_times=object_times)
    result = icp_point_to_plane(index, canon, None, params)
    k = obj.keyframe_index(keyframe_time)
    old = obj.keyframe_pose(k)
    updated = old.compose(result.pose.invert())
    return updated, result


def register_ego_keyframe(
    background_index: MeshProximityIndex,
    points: np.ndarray,
    times: np.ndarray,
    ego: BodyTrajectory,
    keyframe_time: float,
    params: IcpParams | None = None,
) -> tuple[RigidTransform, RegistrationResult]:
    """One pose-step update of the ego keyframe against the background mesh.

    Background points are mapped to world with the current trajectory; the
    rigid correction found by ICP is applied to the keyframe's world pose.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    r, p = ego.poses_at(times)
    world = np.einsum("nij,nj->ni", r, np.asarray(points, dtype=np.float64)) + p
    result = icp_point_to_plane(background_index, world, None, params)
    k = ego.keyframe_index(keyframe_time)
    updated = result.pose.compose(ego.keyframe_pose(k))
    return updated, result
