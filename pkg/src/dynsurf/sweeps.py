"""Sweep data model: per-point timestamps, deskewing, and point assignment.

A sweep is one full sensor rotation. Points carry the fraction of the
rotation period at which they were acquired, with the keyframe at
fraction 1 (the end of the rotation). All deskewing is built on the
constant-velocity trajectory model and is exact for constant-velocity
motion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .se3 import inverse_transform_points, transform_points
from .trajectory import BodyTrajectory


@dataclass
class Sweep:
    points: np.ndarray        # (N, 3) ego frame at acquisition time, meters
    times: np.ndarray         # (N,) fraction of the period in (0, 1]
    beam_ids: np.ndarray      # (N,) laser index
    sweep_index: int
    period_seconds: float
    end_time: float           # absolute time (s) of the closing keyframe

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.beam_ids = np.asarray(self.beam_ids, dtype=np.uint16).reshape(-1)
        if not (len(self.points) == len(self.times) == len(self.beam_ids)):
            raise ValueError("points, times and beam_ids disagree in length")
        if len(self.times) and (self.times.min() < 0.0 or self.times.max() > 1.0):
            raise ValueError("per-point times must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def start_time(self) -> float:
        return self.end_time - self.period_seconds

    @property
    def absolute_times(self) -> np.ndarray:
        """Acquisition time of each point in seconds."""
        return self.end_time - (1.0 - self.times) * self.period_seconds


@dataclass
class SensorSpec:
    """Geometry and timing of the revolving sensor that produced the sweeps."""

    beam_count: int
    elevation_angles: np.ndarray      # (B,) radians per beam
    azimuth_steps_per_rev: int
    period_seconds: float
    max_range: float
    range_noise_sigma: float = 0.0

    def __post_init__(self):
        self.elevation_angles = np.asarray(self.elevation_angles, dtype=np.float64).reshape(-1)
        if len(self.elevation_angles) != self.beam_count:
            raise ValueError("beam_count must match the number of elevation angles")
        if self.period_seconds <= 0.0:
            raise ValueError("period must be positive")

    @staticmethod
    def uniform(
        beam_count: int = 16,
        elevation_min: float = np.deg2rad(-15.0),
        elevation_max: float = np.deg2rad(5.0),
        azimuth_steps_per_rev: int = 1080,
        period_seconds: float = 0.1,
        max_range: float = 80.0,
        range_noise_sigma: float = 0.0,
    ) -> "SensorSpec":
        return SensorSpec(
            beam_count,
            np.linspace(elevation_min, elevation_max, beam_count),
            azimuth_steps_per_rev,
            period_seconds,
            max_range,
            range_noise_sigma,
        )

    def to_json(self) -> dict:
        return {
            "beam_count": int(self.beam_count),
            "elevation_angles": [float(a) for a in self.elevation_angles],
            "azimuth_steps_per_rev": int(self.azimuth_steps_per_rev),
            "period_seconds": float(self.period_seconds),
            "max_range": float(self.max_range),
            "range_noise_sigma": float(self.range_noise_sigma),
        }

    @staticmethod
    def from_json(obj: dict) -> "SensorSpec":
        return SensorSpec(
            beam_count=int(obj["beam_count"]),
            elevation_angles=np.asarray(obj["elevation_angles"], dtype=np.float64),
            azimuth_steps_per_rev=int(obj["azimuth_steps_per_rev"]),
            period_seconds=float(obj["period_seconds"]),
            max_range=float(obj["max_range"]),
            range_noise_sigma=float(obj.get("range_noise_sigma", 0.0)),
        )


@dataclass
class BoundingBoxTrack:
    """Coarse box annotations of one rigid object over time.

    The canonical object frame sits at the box center with x pointing
    forward (along the yaw direction); extents are full side lengths.
    """

    object_id: int
    timestamps: np.ndarray   # (M,) seconds, strictly increasing
    centers: np.ndarray      # (M, 3) meters, world frame
    extents: np.ndarray      # (M, 3) full lengths, meters
    yaws: np.ndarray         # (M,) radians about world z

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(-1, 3)
        self.yaws = np.asarray(self.yaws, dtype=np.float64).reshape(-1)
        m = len(self.timestamps)
        if not (len(self.centers) == len(self.extents) == len(self.yaws) == m):
            raise ValueError("track arrays disagree in length")
        if m == 0:
            raise ValueError("a track needs at least one entry")
        if m > 1 and np.any(np.diff(self.timestamps) <= 0.0):
            raise ValueError("track timestamps must be strictly increasing")
        if np.any(self.extents <= 0.0):
            raise ValueError("box extents must be strictly positive")

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass
class DeskewedSweep:
    """A sweep mapped into the end-of-sweep ego frame.

    Per-point times and the true world-frame emission origins are carried
    forward so downstream consumers can still reason about actor motion
    and free space.
    """

    points: np.ndarray           # (N, 3) in the ego frame at the keyframe
    times: np.ndarray            # (N,) fraction of period, unchanged
    beam_ids: np.ndarray
    ray_origins: np.ndarray      # (N, 3) world-frame emission positions
    sweep_index: int
    period_seconds: float
    end_time: float

    def __len__(self) -> int:
        return len(self.points)

    @property
    def absolute_times(self) -> np.ndarray:
        return self.end_time - (1.0 - self.times) * self.period_seconds


def ego_world_points(sweep: Sweep, ego: BodyTrajectory) -> np.ndarray:
    """Map raw sweep points into the world frame at their acquisition times."""
    r, p = ego.poses_at(sweep.absolute_times)
    return transform_points(r, p, sweep.points)


def ray_origins(sweep: Sweep, ego: BodyTrajectory) -> np.ndarray:
    """World-frame sensor position at each point's true acquisition time."""
    _, p = ego.poses_at(sweep.absolute_times)
    return p


def point_ray_origin(index: int, sweep: Sweep, ego: BodyTrajectory) -> np.ndarray:
    """Emission origin of a single point, world frame."""
    t = float(sweep.absolute_times[index])
    return ego.pose_at(t).translation


def deskew_ego(sweep: Sweep, ego: BodyTrajectory) -> DeskewedSweep:
    """Undo ego motion within the sweep: all points land in the end frame."""
    world = ego_world_points(sweep, ego)
    end = ego.pose_at(sweep.end_time).invert()
    return DeskewedSweep(
        points=end.apply(world),
        times=sweep.times.copy(),
        beam_ids=sweep.beam_ids.copy(),
        ray_origins=ray_origins(sweep, ego),
        sweep_index=sweep.sweep_index,
        period_seconds=sweep.period_seconds,
        end_time=sweep.end_time,
    )


def canonicalize_object_points(
    points: np.ndarray,
    times: np.ndarray,
    ego: BodyTrajectory,
    obj: BodyTrajectory,
    *,
    already_ego_deskewed: bool = False,
    reference_time: float | None = None,
    object_times: np.ndarray | None = None,
) -> np.ndarray:
    """Map per-point observations of a rigid object into its canonical frame.

    times are absolute seconds. When the points were already deskewed into
    the ego frame at reference_time, the per-point ego interpolation is
    omitted and only the object's own motion is undone, mirroring how
    ego-motion-compensated datasets are handled. object_times overrides the
    times at which the object pose is evaluated (the no-actor-deskew
    ablation passes the keyframe time for all points).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if already_ego_deskewed:
        if reference_time is None:
            raise ValueError("reference_time is required for ego-deskewed input")
        world = ego.pose_at(reference_time).apply(pts)
    else:
        r, p = ego.poses_at(times)
        world = transform_points(r, p, pts)
    ro, rp = obj.poses_at(times if object_times is None else object_times)
    return inverse_transform_points(ro, rp, world)


def world_points_to_canonical(
    world_points: np.ndarray, times: np.ndarray, obj: BodyTrajectory
) -> np.ndarray:
    """Map world-frame positions into the object frame at per-point times."""
    ro, rp = obj.poses_at(times)
    return inverse_transform_points(ro, rp, np.asarray(world_points, dtype=np.float64))


def assign_points(
    sweep: Sweep,
    ego: BodyTrajectory,
    objects: Sequence[tuple[int, BodyTrajectory, np.ndarray]],
    *,
    margin: float = 0.0,
) -> np.ndarray:
    """Label each point with the id of the box it falls into (0 = background).

    Boxes are evaluated at each point's own acquisition time. A point inside
    several overlapping boxes goes to the box whose center is nearest, which
    keeps runs reproducible.
    """
    n = len(sweep)
    labels = np.zeros(n, dtype=np.int64)
    if not objects or n == 0:
        return labels
    world = ego_world_points(sweep, ego)
    times = sweep.absolute_times
    best_center_d = np.full(n, np.inf)
    for object_id, traj, extent in objects:
        if object_id == 0:
            raise ValueError("object id 0 is reserved for the background")
        lo, hi = traj.span
        covered = (times >= lo - 1e-9) & (times <= hi + 1e-9)
        if not np.any(covered):
            continue
        idx = np.flatnonzero(covered)
        local = world_points_to_canonical(world[idx], times[idx], traj)
        half = np.asarray(extent, dtype=np.float64) * 0.5 + margin
        inside = np.all(np.abs(local) <= half, axis=1)
        if not np.any(inside):
            continue
        center_d = np.linalg.norm(local, axis=1)
        take = inside & (center_d < best_center_d[idx])
        sel = idx[take]
        labels[sel] = object_id
        best_center_d[sel] = center_d[take]
    return labels
