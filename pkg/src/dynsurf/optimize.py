"""Coordinate descent over surfaces and poses.

Each outer iteration first rebuilds every active surface from the points
canonicalized with the current trajectories (mesh step), then registers
each keyframe's points against the fixed surfaces and updates the
keyframe poses (pose step). Ego keyframes are refined against the
background before actors are refined against their own meshes. Objects
stop early once their mean registration residual stays below the
threshold for enough consecutive iterations, and are frozen afterwards.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConvergenceFailure, DivergedRegistration, SkipObject
from .icp import IcpParams, register_ego_keyframe, register_object_keyframe
from .mesh import MeshProximityIndex, TriangleMesh
from .scene import BACKGROUND_ID, SceneModel, SceneObject
from .se3 import RigidTransform, rot_z
from .sweeps import BoundingBoxTrack, Sweep, assign_points, canonicalize_object_points, ego_world_points, ray_origins
from .trajectory import BodyTrajectory
from .tsdf import ReconParams, reconstruct_surface

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    max_outer_iterations: int = 100
    early_stop_residual: float = 0.01       # meters
    early_stop_streak: int = 3
    min_points_per_view: int = 50
    icp: IcpParams = field(default_factory=IcpParams)
    object_recon: ReconParams = field(default_factory=lambda: ReconParams(voxel_size=0.05))
    background_recon: ReconParams = field(default_factory=lambda: ReconParams(voxel_size=0.15))
    box_margin: float = 0.0
    deskew_actors: bool = True    # ablation: per-point actor motion correction
    refine_poses: bool = True     # ablation: pose steps on/off


@dataclass
class IterationRecord:
    iteration: int
    objective: dict[int, float]       # per-object summed NN distance after the mesh step
    residual: dict[int, float]        # per-object mean registration residual
    inliers: dict[int, int]
    stopped: dict[int, bool]

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "objects": {
                str(k): {
                    "objective": self.objective.get(k),
                    "residual": self.residual.get(k),
                    "inliers": self.inliers.get(k),
                    "stopped": bool(self.stopped.get(k, False)),
                }
                for k in sorted(set(self.objective) | set(self.residual) | set(self.stopped))
            },
        }


@dataclass
class ConvergenceReport:
    iterations: list[IterationRecord]
    zero_view_objects: list[int]
    single_entry_tracks: list[int]
    stopped_at: dict[int, int]

    def to_json(self) -> dict:
        return {
            "iterations": [r.to_json() for r in self.iterations],
            "zero_view_objects": self.zero_view_objects,
            "single_entry_tracks": self.single_entry_tracks,
            "stopped_at": {str(k): v for k, v in self.stopped_at.items()},
        }

    @property
    def objective_trace(self) -> list[float]:
        return [sum(r.objective.values()) for r in self.iterations]


@dataclass
class OptimizationResult:
    scene: SceneModel
    report: ConvergenceReport
    assignments: list[np.ndarray]
    extents: dict[int, np.ndarray]


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return np.arctan2(np.sin(a), np.cos(a))


def interpolate_tracks(
    tracks: Sequence[BoundingBoxTrack],
    keyframe_times: np.ndarray,
    period: float,
) -> tuple[dict[int, BodyTrajectory], dict[int, np.ndarray], list[int]]:
    """Resample box tracks onto the keyframe grid.

    Centers interpolate linearly, yaw along the shortest arc. Beyond the
    first/last annotation poses extrapolate at constant velocity, capped at
    one sweep period. Returns (trajectories, extents, single-entry ids).
    """
    keyframe_times = np.asarray(keyframe_times, dtype=np.float64)
    trajectories: dict[int, BodyTrajectory] = {}
    extents: dict[int, np.ndarray] = {}
    flagged: list[int] = []
    for track in tracks:
        ts = track.timestamps
        extent = np.median(track.extents, axis=0)
        if len(ts) == 1:
            flagged.append(track.object_id)
            lo, hi = ts[0] - period, ts[0] + period
            mask = (keyframe_times >= lo - 1e-9) & (keyframe_times <= hi + 1e-9)
            kf = keyframe_times[mask]
            if len(kf) == 0:
                continue
            r = np.broadcast_to(rot_z(track.yaws[0]), (len(kf), 3, 3)).copy()
            p = np.broadcast_to(track.centers[0], (len(kf), 3)).copy()
            trajectories[track.object_id] = BodyTrajectory(kf, r, p)
            extents[track.object_id] = extent
            continue
        lo, hi = ts[0] - period, ts[-1] + period
        mask = (keyframe_times >= lo - 1e-9) & (keyframe_times <= hi + 1e-9)
        kf = keyframe_times[mask]
        if len(kf) == 0:
            continue
        # np.interp clamps outside the annotation range; extrapolate instead
        # with the boundary segment's velocity (capped to one period above).
        centers = np.stack([np.interp(kf, ts, track.centers[:, i]) for i in range(3)], axis=1)
        unwrapped = np.unwrap(track.yaws)
        yaws = np.interp(kf, ts, unwrapped)
        before = kf < ts[0]
        if np.any(before):
            v0 = (track.centers[1] - track.centers[0]) / (ts[1] - ts[0])
            w0 = (unwrapped[1] - unwrapped[0]) / (ts[1] - ts[0])
            dt = (kf[before] - ts[0])[:, None]
            centers[before] = track.centers[0] + v0 * dt
            yaws[before] = unwrapped[0] + w0 * dt[:, 0]
        after = kf > ts[-1]
        if np.any(after):
            v1 = (track.centers[-1] - track.centers[-2]) / (ts[-1] - ts[-2])
            w1 = (unwrapped[-1] - unwrapped[-2]) / (ts[-1] - ts[-2])
            dt = (kf[after] - ts[-1])[:, None]
            centers[after] = track.centers[-1] + v1 * dt
            yaws[after] = unwrapped[-1] + w1 * dt[:, 0]
        rotations = np.stack([rot_z(y) for y in yaws])
        trajectories[track.object_id] = BodyTrajectory(kf, rotations, centers)
        extents[track.object_id] = extent
    return trajectories, extents, flagged


def _object_views(
    sweeps: Sequence[Sweep],
    assignments: Sequence[np.ndarray],
    oid: int,
    min_points: int,
) -> list[tuple[int, np.ndarray]]:
    """(sweep position, point index array) pairs with enough points."""
    views = []
    for si, (sweep, labels) in enumerate(zip(sweeps, assignments)):
        idx = np.flatnonzero(labels == oid)
        if len(idx) >= min_points:
            views.append((si, idx))
    return views


def run(
    tracks: Sequence[BoundingBoxTrack],
    ego: BodyTrajectory,
    sweeps: Sequence[Sweep],
    config: OptimizerConfig | None = None,
) -> OptimizationResult:
    """Alternate surface and pose optimization until convergence.

    tracks and ego seed the trajectories; sweeps are the measurements.
    Objects whose every view has too few points are carried through
    unmodified and flagged in the report.
    """
    config = config or OptimizerConfig()
    t0 = time.perf_counter()
    period = sweeps[0].period_seconds
    keyframe_times = np.concatenate(
        [[sweeps[0].end_time - period], [s.end_time for s in sweeps]]
    )
    ego = ego.copy()
    if not ego.covers(keyframe_times[0], keyframe_times[-1]):
        raise ConvergenceFailure("ego trajectory does not cover the sweep interval")

    trajectories, extents, flagged = interpolate_tracks(tracks, keyframe_times, period)
    boxes = [(oid, trajectories[oid], extents[oid]) for oid in sorted(trajectories)]
    assignments = [
        assign_points(s, ego, boxes, margin=config.box_margin) for s in sweeps
    ]

    views: dict[int, list[tuple[int, np.ndarray]]] = {}
    zero_view = []
    for oid in sorted(trajectories):
        v = _object_views(sweeps, assignments, oid, config.min_points_per_view)
        if v:
            views[oid] = v
        else:
            zero_view.append(oid)
            log.warning("object %d has no usable views; carried through unmodified", oid)

    background_views = _object_views(sweeps, assignments, BACKGROUND_ID, 1)

    meshes: dict[int, TriangleMesh] = {}
    stopped: dict[int, bool] = {BACKGROUND_ID: False, **{oid: False for oid in views}}
    streak: dict[int, int] = {k: 0 for k in stopped}
    stopped_at: dict[int, int] = {}
    records: list[IterationRecord] = []

    def mesh_step(active: dict[int, bool]) -> dict[int, float]:
        objective: dict[int, float] = {}
        if active.get(BACKGROUND_ID, False):
            pts, orgs = [], []
            for si, idx in background_views:
                sweep = sweeps[si]
                pts.append(ego_world_points(sweep, ego)[idx])
                orgs.append(ray_origins(sweep, ego)[idx])
            if pts:
                res = reconstruct_surface(
                    np.vstack(pts), np.vstack(orgs), config.background_recon
                )
                meshes[BACKGROUND_ID] = res.mesh
                objective[BACKGROUND_ID] = res.nn_sum
        for oid, v in views.items():
            if not active.get(oid, False):
                continue
            traj = trajectories[oid]
            pts, orgs = [], []
            for si, idx in v:
                sweep = sweeps[si]
                times = sweep.absolute_times[idx]
                obj_times = times if config.deskew_actors else np.full(len(idx), sweep.end_time)
                pts.append(
                    canonicalize_object_points(
                        sweep.points[idx], times, ego, traj, object_times=obj_times
                    )
                )
                _, p = ego.poses_at(times)  # sensor position is the ray origin
                ro, rp = traj.poses_at(obj_times)
                orgs.append(np.einsum("nji,nj->ni", ro, p - rp))
            try:
                res = reconstruct_surface(np.vstack(pts), np.vstack(orgs), config.object_recon)
            except SkipObject:
                continue
            if not res.mesh.is_empty:
                meshes[oid] = res.mesh
                objective[oid] = res.nn_sum
        return objective

    def pose_step() -> tuple[dict[int, float], dict[int, int]]:
        residuals: dict[int, list[tuple[float, int]]] = {}
        inliers: dict[int, int] = {}
        # Ego first, against the background; corrections apply after the pass.
        if not stopped[BACKGROUND_ID] and BACKGROUND_ID in meshes and not meshes[BACKGROUND_ID].is_empty:
            index = MeshProximityIndex(meshes[BACKGROUND_ID])
            updates = []
            for si, idx in background_views:
                sweep = sweeps[si]
                if len(idx) < config.min_points_per_view:
                    continue
                try:
                    pose, result = register_ego_keyframe(
                        index,
                        sweep.points[idx],
                        sweep.absolute_times[idx],
                        ego,
                        sweep.end_time,
                        config.icp,
                    )
                except (SkipObject, DivergedRegistration) as e:
                    log.warning("ego registration skipped for sweep %d: %s", sweep.sweep_index, e)
                    continue
                updates.append((sweep.end_time, pose))
                residuals.setdefault(BACKGROUND_ID, []).append(
                    (result.mean_residual, result.inlier_count)
                )
            # The first keyframe is the world anchor and is never moved.
            for t_kf, pose in updates:
                k = ego.keyframe_index(t_kf)
                if k > 0:
                    ego.set_keyframe_pose(k, pose)
        for oid, v in views.items():
            if stopped[oid] or oid not in meshes or meshes[oid].is_empty:
                continue
            index = MeshProximityIndex(meshes[oid])
            traj = trajectories[oid]
            updates = []
            first_sweep_end = None
            for si, idx in v:
                sweep = sweeps[si]
                if not traj.covers(sweep.end_time):
                    continue
                try:
                    pose, result = register_object_keyframe(
                        index,
                        sweep.points[idx],
                        sweep.absolute_times[idx],
                        ego,
                        traj,
                        sweep.end_time,
                        config.icp,
                        deskew=config.deskew_actors,
                    )
                except (SkipObject, DivergedRegistration) as e:
                    log.warning("object %d sweep %d: %s", oid, sweep.sweep_index, e)
                    continue
                if first_sweep_end is None:
                    first_sweep_end = sweep.end_time
                    first_correction = pose.compose(
                        traj.keyframe_pose(traj.keyframe_index(sweep.end_time)).invert()
                    )
                updates.append((sweep.end_time, pose))
                residuals.setdefault(oid, []).append((result.mean_residual, result.inlier_count))
            for t_kf, pose in updates:
                traj.set_keyframe_pose(traj.keyframe_index(t_kf), pose)
            # Keyframes strictly before the first registered sweep (usually
            # just the opening keyframe) ride along rigidly with that sweep's
            # correction, preserving the segment twist.
            if updates and first_sweep_end is not None:
                before = np.flatnonzero(traj.times < first_sweep_end - 1e-9)
                for k in before:
                    traj.set_keyframe_pose(
                        int(k), first_correction.compose(traj.keyframe_pose(int(k)))
                    )
        mean_res = {}
        for oid, pairs in residuals.items():
            w = np.array([c for _, c in pairs], dtype=np.float64)
            r = np.array([m for m, _ in pairs])
            mean_res[oid] = float((r * w).sum() / w.sum()) if w.sum() else np.inf
            inliers[oid] = int(w.sum())
        return mean_res, inliers

    n_iter = 0
    for it in range(1, config.max_outer_iterations + 1):
        n_iter = it
        active = {k: not stopped[k] for k in stopped}
        objective = mesh_step(active)
        if not config.refine_poses:
            records.append(
                IterationRecord(it, objective, {}, {}, dict(stopped))
            )
            break
        residual, inliers = pose_step()
        for oid, r in residual.items():
            if r < config.early_stop_residual:
                streak[oid] += 1
            else:
                streak[oid] = 0
            if streak[oid] >= config.early_stop_streak and not stopped[oid]:
                stopped[oid] = True
                stopped_at[oid] = it
        records.append(IterationRecord(it, objective, residual, inliers, dict(stopped)))
        log.info(
            "iteration %d: objective %.4f, residuals %s",
            it,
            sum(objective.values()),
            {k: round(v, 4) for k, v in residual.items()},
        )
        if all(stopped.values()):
            break

    # Objects that never early-stopped had their poses move after the last
    # mesh build; rebuild their surfaces so the output is self-consistent.
    # Early-stopped objects stay frozen as of their stopping iteration.
    if config.refine_poses:
        objective = mesh_step({k: not stopped[k] for k in stopped})
        if objective:
            last = records[-1]
            merged = dict(last.objective)
            merged.update(objective)
            records.append(
                IterationRecord(n_iter + 1, merged, last.residual, last.inliers, dict(stopped))
            )

    objects = {}
    for oid, traj in trajectories.items():
        mesh = meshes.get(oid, TriangleMesh.empty())
        objects[oid] = SceneObject(mesh=mesh, trajectory=traj)
    scene = SceneModel(
        background=meshes.get(BACKGROUND_ID, TriangleMesh.empty()),
        ego=ego,
        objects=objects,
    )
    if BACKGROUND_ID not in meshes and not views:
        raise ConvergenceFailure("no background and no usable objects were reconstructed")
    report = ConvergenceReport(
        iterations=records,
        zero_view_objects=zero_view,
        single_entry_tracks=flagged,
        stopped_at=stopped_at,
    )
    log.info("optimization finished in %.1f s, %d iterations", time.perf_counter() - t0, n_iter)
    return OptimizationResult(scene=scene, report=report, assignments=assignments, extents=extents)
