"""Synthetic rolling-shutter LiDAR with exact ground truth.

Rays are cast analytically against planes, boxes and triangle meshes, one
azimuth column at a time, with the sensor and every actor posed at the
exact firing time. The emitted dataset carries per-point true object ids
and emission origins, so it serves as the oracle for deskewing, fusion,
registration and evaluation. With zero range noise every emitted point
lies exactly on a ground-truth surface posed at its firing time.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataio import Dataset
from .mesh import TriangleMesh, cast_rays_brute
from .se3 import RigidTransform, exp_rotation, rot_z
from .sweeps import BoundingBoxTrack, SensorSpec, Sweep
from .trajectory import BodyTrajectory


# ---------------------------------------------------------------------------
# Static background primitives (world frame)
# ---------------------------------------------------------------------------

class Primitive:
    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Hit parameter per ray (meters along unit dirs), inf on miss."""
        raise NotImplementedError


@dataclass
class PlanePrimitive(Primitive):
    """A rectangle (or infinite plane) given by center, normal and in-plane axes."""

    center: np.ndarray
    normal: np.ndarray
    half_size: Optional[tuple[float, float]] = None  # None = infinite
    axis_u: Optional[np.ndarray] = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.normal = n / np.linalg.norm(n)
        if self.axis_u is None:
            seed = np.array([1.0, 0.0, 0.0])
            if abs(self.normal @ seed) > 0.9:
                seed = np.array([0.0, 1.0, 0.0])
            u = np.cross(self.normal, seed)
            self.axis_u = u / np.linalg.norm(u)
        else:
            self.axis_u = np.asarray(self.axis_u, dtype=np.float64).reshape(3)
        self.axis_v = np.cross(self.normal, self.axis_u)

    def raycast(self, origins, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - origins) @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)
        if self.half_size is not None:
            fin = np.isfinite(t)
            hit = origins[fin] + dirs[fin] * t[fin, None]
            rel = hit - self.center
            u = rel @ self.axis_u
            v = rel @ self.axis_v
            inside = (np.abs(u) <= self.half_size[0]) & (np.abs(v) <= self.half_size[1])
            tf = t[fin]
            tf[~inside] = np.inf
            t[fin] = tf
        return t


@dataclass
class BoxPrimitive(Primitive):
    """Hollow cuboid surface, posed in the world."""

    pose: RigidTransform
    extent: np.ndarray  # full side lengths

    def __post_init__(self):
        self.extent = np.asarray(self.extent, dtype=np.float64).reshape(3)

    def raycast(self, origins, dirs):
        inv = self.pose.invert()
        o = inv.apply(origins)
        d = dirs @ inv.rotation.T
        half = self.extent * 0.5
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        t_lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        t_hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
        par = d == 0.0
        if np.any(par):
            inside = (o >= -half) & (o <= half)
            t_lo = np.where(par, np.where(inside, -np.inf, np.inf), t_lo)
            t_hi = np.where(par, np.where(inside, np.inf, -np.inf), t_hi)
        enter = t_lo.max(axis=1)
        exit_ = t_hi.min(axis=1)
        # From outside the first hit is the entry; from inside it is the exit.
        t = np.where(enter > 1e-9, enter, np.where(exit_ > 1e-9, exit_, np.inf))
        return np.where(enter <= exit_, t, np.inf)


@dataclass
class MeshPrimitive(Primitive):
    mesh: TriangleMesh
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def raycast(self, origins, dirs):
        inv = self.pose.invert()
        t, _ = cast_rays_brute(self.mesh, inv.apply(origins), dirs @ inv.rotation.T)
        return t


# ---------------------------------------------------------------------------
# Scene configuration
# ---------------------------------------------------------------------------

@dataclass
class ActorSpec:
    object_id: int
    mesh: TriangleMesh           # canonical frame, x forward
    trajectory: BodyTrajectory   # canonical frame -> world
    extent: np.ndarray           # annotated box extent (full lengths)

    def __post_init__(self):
        self.extent = np.asarray(self.extent, dtype=np.float64).reshape(3)
        if self.object_id == 0:
            raise ValueError("actor ids must be nonzero")


@dataclass
class SimSceneConfig:
    sensor: SensorSpec
    ego: BodyTrajectory
    background: list[Primitive]
    actors: list[ActorSpec]
    sweep_count: int
    seed: int = 0

    def __post_init__(self):
        ids = [a.object_id for a in self.actors]
        if len(set(ids)) != len(ids):
            raise ValueError("actor ids must be unique")


def constant_velocity_trajectory(
    start: RigidTransform,
    linear_velocity,
    yaw_rate: float,
    times: np.ndarray,
) -> BodyTrajectory:
    """Keyframes for straight world-frame motion with a constant yaw rate.

    The keyframe sequence is exactly reproduced by the constant-velocity
    interpolation model at every intermediate time.
    """
    times = np.asarray(times, dtype=np.float64)
    v = np.asarray(linear_velocity, dtype=np.float64).reshape(3)
    dt = times - times[0]
    rotations = np.stack([start.rotation @ rot_z(yaw_rate * d) for d in dt])
    translations = start.translation + v[None, :] * dt[:, None]
    return BodyTrajectory(times, rotations, translations)


def heading_arc_trajectory(
    start: RigidTransform,
    speed: float,
    yaw_rate: float,
    times: np.ndarray,
) -> BodyTrajectory:
    """Keyframes for a turning body whose velocity follows its heading.

    Between keyframes motion still follows the piecewise constant-velocity
    model; across keyframes the heading (and so the velocity direction)
    rotates, producing a genuinely nonlinear world path.
    """
    times = np.asarray(times, dtype=np.float64)
    rotations = [start.rotation]
    translations = [start.translation.copy()]
    for i in range(1, len(times)):
        dt = times[i] - times[i - 1]
        r_prev = rotations[-1]
        forward = r_prev @ np.array([1.0, 0.0, 0.0])
        translations.append(translations[-1] + forward * speed * dt)
        rotations.append(r_prev @ rot_z(yaw_rate * dt))
    return BodyTrajectory(times, np.stack(rotations), np.stack(translations))


def firing_pattern(sensor: SensorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-firing time fractions and unit directions in the ego frame.

    Returns (fractions (S,), dirs (S, B, 3)) where S is azimuth steps and
    B the beam count. The sensor sweeps a full revolution per period; the
    last firing lands exactly on the keyframe at fraction 1.
    """
    steps = sensor.azimuth_steps_per_rev
    fr = (np.arange(steps, dtype=np.float64) + 1.0) / steps
    az = 2.0 * np.pi * fr
    el = sensor.elevation_angles
    cos_el = np.cos(el)[None, :]
    dirs = np.stack(
        [
            np.cos(az)[:, None] * cos_el,
            np.sin(az)[:, None] * cos_el,
            np.broadcast_to(np.sin(el), (steps, len(el))),
        ],
        axis=2,
    )
    return fr, dirs


def _cast_actor(
    actor: ActorSpec,
    poses_r: np.ndarray,
    poses_p: np.ndarray,
    origins: np.ndarray,
    dirs: np.ndarray,
) -> np.ndarray:
    """Rays vs one actor posed per ray; origins/dirs in world, (N, 3)."""
    local_o = np.einsum("nji,nj->ni", poses_r, origins - poses_p)
    local_d = np.einsum("nji,nj->ni", poses_r, dirs)
    t, _ = cast_rays_brute(actor.mesh, local_o, local_d)
    return t


def simulate(config: SimSceneConfig) -> Dataset:
    """Render the configured scene into sweeps with full ground truth."""
    sensor = config.sensor
    rng = np.random.default_rng(config.seed)
    fractions, beam_dirs = firing_pattern(sensor)
    steps, beams = beam_dirs.shape[:2]
    period = sensor.period_seconds

    sweeps: list[Sweep] = []
    gt_labels: list[np.ndarray] = []
    gt_origins: list[np.ndarray] = []
    for k in range(config.sweep_count):
        end_time = (k + 1) * period
        f_times = end_time - (1.0 - fractions) * period
        ego_r, ego_p = config.ego.poses_at(f_times)

        # All rays of the sweep, world frame, grouped (azimuth, beam).
        d_world = np.einsum("sij,sbj->sbi", ego_r, beam_dirs).reshape(-1, 3)
        o_world = np.repeat(ego_p, beams, axis=0)
        n = len(o_world)

        best_t = np.full(n, np.inf)
        best_id = np.zeros(n, dtype=np.int64)
        for prim in config.background:
            t = prim.raycast(o_world, d_world)
            closer = t < best_t
            best_t[closer] = t[closer]
        for actor in config.actors:
            lo, hi = actor.trajectory.span
            f_rep = np.repeat(f_times, beams)
            covered = (f_rep >= lo - 1e-9) & (f_rep <= hi + 1e-9)
            if not np.any(covered):
                continue
            ar, ap = actor.trajectory.poses_at(f_rep[covered])
            t = _cast_actor(actor, ar, ap, o_world[covered], d_world[covered])
            idx = np.flatnonzero(covered)
            closer = t < best_t[idx]
            sel = idx[closer]
            best_t[sel] = t[closer]
            best_id[sel] = actor.object_id

        hit = best_t <= sensor.max_range
        ranges = best_t[hit]
        if sensor.range_noise_sigma > 0.0:
            ranges = ranges + rng.normal(0.0, sensor.range_noise_sigma, len(ranges))
        # Points in the ego frame at their own firing time.
        dirs_ego = np.broadcast_to(beam_dirs, (steps, beams, 3)).reshape(-1, 3)[hit]
        pts_ego = dirs_ego * ranges[:, None]
        t_frac = np.repeat(fractions, beams)[hit]
        beam_idx = np.tile(np.arange(beams, dtype=np.uint16), steps)[hit]

        sweeps.append(
            Sweep(
                points=pts_ego,
                times=t_frac,
                beam_ids=beam_idx,
                sweep_index=k,
                period_seconds=period,
                end_time=end_time,
            )
        )
        gt_labels.append(best_id[hit])
        gt_origins.append(o_world[hit])

    keyframe_times = np.arange(config.sweep_count + 1) * period
    tracks = []
    for actor in config.actors:
        lo, hi = actor.trajectory.span
        mask = (keyframe_times >= lo - 1e-9) & (keyframe_times <= hi + 1e-9)
        ts = keyframe_times[mask]
        r, p = actor.trajectory.poses_at(ts)
        yaws = np.arctan2(r[:, 1, 0], r[:, 0, 0])
        tracks.append(
            BoundingBoxTrack(
                object_id=actor.object_id,
                timestamps=ts,
                centers=p,
                extents=np.tile(actor.extent, (len(ts), 1)),
                yaws=yaws,
            )
        )

    ego_kf = BodyTrajectory(
        keyframe_times, *config.ego.poses_at(keyframe_times)
    )
    return Dataset(
        sweeps=sweeps,
        tracks=[t for t in tracks],
        ego=ego_kf,
        sensor=sensor,
        gt_labels=gt_labels,
        gt_origins=gt_origins,
        gt_tracks=[t for t in tracks],
        gt_ego=ego_kf.copy(),
    )


# ---------------------------------------------------------------------------
# Annotation degradation
# ---------------------------------------------------------------------------

@dataclass
class NoiseSpec:
    center_sigma: float = 0.0       # meters, per axis, on box centers
    yaw_sigma: float = 0.0          # radians on box yaw
    ego_translation_sigma: float = 0.0  # meters, per axis, on ego keyframes
    ego_rotation_sigma: float = 0.0     # radians about a random axis


def perturb_annotations(
    tracks: Sequence[BoundingBoxTrack],
    ego: BodyTrajectory,
    noise: NoiseSpec,
    subsample_hz: float | None = None,
    seed: int = 0,
) -> tuple[list[BoundingBoxTrack], BodyTrajectory]:
    """Deterministic seeded degradation of ground-truth annotations.

    Subsampling keeps every n-th entry starting with the first, where n is
    the ratio of the native annotation rate to subsample_hz. The ego
    keyframes keep their native rate (they come from odometry, not labels).
    """
    rng = np.random.default_rng(seed)
    out_tracks = []
    for track in tracks:
        ts, centers, extents, yaws = (
            track.timestamps.copy(),
            track.centers.copy(),
            track.extents.copy(),
            track.yaws.copy(),
        )
        if subsample_hz is not None and len(ts) > 1:
            native = 1.0 / np.median(np.diff(ts))
            n = max(1, int(round(native / subsample_hz)))
            keep = np.arange(0, len(ts), n)
            ts, centers, extents, yaws = ts[keep], centers[keep], extents[keep], yaws[keep]
        if noise.center_sigma > 0.0:
            centers = centers + rng.normal(0.0, noise.center_sigma, centers.shape)
        if noise.yaw_sigma > 0.0:
            yaws = yaws + rng.normal(0.0, noise.yaw_sigma, yaws.shape)
        out_tracks.append(
            BoundingBoxTrack(track.object_id, ts, centers, extents, yaws)
        )
    rotations = ego.rotations.copy()
    translations = ego.translations.copy()
    if noise.ego_translation_sigma > 0.0:
        translations = translations + rng.normal(
            0.0, noise.ego_translation_sigma, translations.shape
        )
    if noise.ego_rotation_sigma > 0.0:
        for i in range(len(rotations)):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.normal(0.0, noise.ego_rotation_sigma)
            rotations[i] = exp_rotation(axis * angle) @ rotations[i]
    return out_tracks, BodyTrajectory(ego.times.copy(), rotations, translations)


# ---------------------------------------------------------------------------
# JSON scene configs (CLI surface)
# ---------------------------------------------------------------------------

def _pose_from_json(obj: dict) -> RigidTransform:
    if "pose" in obj:
        return RigidTransform.from_json(obj["pose"])
    yaw = np.deg2rad(float(obj.get("yaw_deg", 0.0)))
    pos = np.asarray(obj.get("position", [0.0, 0.0, 0.0]), dtype=np.float64)
    return RigidTransform(rot_z(yaw), pos)


def _trajectory_from_json(obj: dict, times: np.ndarray) -> BodyTrajectory:
    start = _pose_from_json(obj)
    kind = obj.get("motion", "world_velocity")
    yaw_rate = np.deg2rad(float(obj.get("yaw_rate_deg", 0.0)))
    if kind == "world_velocity":
        v = np.asarray(obj.get("linear_velocity", [0.0, 0.0, 0.0]), dtype=np.float64)
        return constant_velocity_trajectory(start, v, yaw_rate, times)
    if kind == "heading_arc":
        return heading_arc_trajectory(start, float(obj.get("speed", 0.0)), yaw_rate, times)
    raise ValueError(f"unknown motion kind {kind!r}")


def load_sim_config(path) -> SimSceneConfig:
    """Build a simulator configuration from its JSON description."""
    with open(path) as f:
        cfg = json.load(f)
    s = cfg.get("sensor", {})
    sensor = SensorSpec.uniform(
        beam_count=int(s.get("beam_count", 16)),
        elevation_min=np.deg2rad(float(s.get("elevation_min_deg", -15.0))),
        elevation_max=np.deg2rad(float(s.get("elevation_max_deg", 5.0))),
        azimuth_steps_per_rev=int(s.get("azimuth_steps", 1080)),
        period_seconds=float(s.get("period_seconds", 0.1)),
        max_range=float(s.get("max_range", 80.0)),
        range_noise_sigma=float(s.get("range_noise_sigma", 0.0)),
    )
    sweep_count = int(cfg["sweep_count"])
    times = np.arange(sweep_count + 1) * sensor.period_seconds
    ego = _trajectory_from_json(cfg.get("ego", {}), times)
    background: list[Primitive] = []
    for b in cfg.get("background", []):
        kind = b["type"]
        if kind == "plane":
            background.append(
                PlanePrimitive(
                    center=np.asarray(b["center"], dtype=np.float64),
                    normal=np.asarray(b["normal"], dtype=np.float64),
                    half_size=tuple(b["half_size"]) if "half_size" in b else None,
                )
            )
        elif kind == "box":
            background.append(BoxPrimitive(pose=_pose_from_json(b), extent=b["extent"]))
        else:
            raise ValueError(f"unknown background primitive {kind!r}")
    actors = []
    for a in cfg.get("actors", []):
        extent = np.asarray(a["extent"], dtype=np.float64)
        actors.append(
            ActorSpec(
                object_id=int(a["id"]),
                mesh=TriangleMesh.box(extent),
                trajectory=_trajectory_from_json(a, times),
                extent=extent,
            )
        )
    return SimSceneConfig(
        sensor=sensor,
        ego=ego,
        background=background,
        actors=actors,
        sweep_count=sweep_count,
        seed=int(cfg.get("seed", 0)),
    )
