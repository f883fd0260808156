"""Keyframed body trajectories with constant-velocity interpolation.

A trajectory stores body-to-world poses at strictly increasing keyframe
times. Between keyframes the pose follows the split constant-velocity
model: the world position of the body origin moves on a straight line and
the rotation follows the geodesic between the keyframe rotations. Queries
outside the covered span raise TrajectoryCoverageError.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import TrajectoryCoverageError
from .se3 import RigidTransform, so3_exp, so3_log

_TIME_EPS = 1e-9


@dataclass
class BodyTrajectory:
    times: np.ndarray        # (K,) seconds, strictly increasing
    rotations: np.ndarray    # (K, 3, 3) body-to-world
    translations: np.ndarray  # (K, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if not (len(self.times) == len(self.rotations) == len(self.translations)):
            raise ValueError("keyframe arrays disagree in length")
        if len(self.times) < 1:
            raise ValueError("a trajectory needs at least one keyframe")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0.0):
            raise ValueError("keyframe times must be strictly increasing")

    @staticmethod
    def from_poses(times: Iterable[float], poses: Sequence[RigidTransform]) -> "BodyTrajectory":
        poses = list(poses)
        return BodyTrajectory(
            np.asarray(list(times), dtype=np.float64),
            np.stack([p.rotation for p in poses]),
            np.stack([p.translation for p in poses]),
        )

    def __len__(self) -> int:
        return len(self.times)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def covers(self, t0: float, t1: float | None = None) -> bool:
        lo, hi = self.span
        t1 = t0 if t1 is None else t1
        return t0 >= lo - _TIME_EPS and t1 <= hi + _TIME_EPS

    def keyframe_pose(self, index: int) -> RigidTransform:
        return RigidTransform(self.rotations[index], self.translations[index])

    def set_keyframe_pose(self, index: int, pose: RigidTransform) -> None:
        self.rotations[index] = pose.rotation
        self.translations[index] = pose.translation

    def keyframe_index(self, time: float) -> int:
        """Index of the keyframe at exactly this time (within 1e-9 s)."""
        i = int(np.argmin(np.abs(self.times - time)))
        if abs(self.times[i] - time) > 1e-9:
            raise KeyError(f"no keyframe at t={time}")
        return i

    def _segments(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.span
        t = np.asarray(times, dtype=np.float64)
        if np.any(t < lo - _TIME_EPS) or np.any(t > hi + _TIME_EPS):
            bad = t[(t < lo - _TIME_EPS) | (t > hi + _TIME_EPS)][0]
            raise TrajectoryCoverageError(
                f"time {bad:.6f} s outside trajectory span [{lo:.6f}, {hi:.6f}]"
            )
        if len(self.times) == 1:
            return np.zeros(len(t), dtype=np.intp), np.zeros(len(t))
        j = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        s = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        return j, np.clip(s, 0.0, 1.0)

    def poses_at(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched interpolation: (N,) times -> ((N, 3, 3), (N, 3)) body-to-world."""
        times = np.asarray(times, dtype=np.float64).reshape(-1)
        if len(self.times) == 1:
            r = np.broadcast_to(self.rotations[0], (len(times), 3, 3)).copy()
            p = np.broadcast_to(self.translations[0], (len(times), 3)).copy()
            self._segments(times)  # still enforce coverage
            return r, p
        j, s = self._segments(times)
        uniq, inv = np.unique(j, return_inverse=True)
        # Relative rotation of segment start seen from segment end.
        rel = np.einsum("nji,njk->nik", self.rotations[uniq + 1], self.rotations[uniq])
        w = so3_log(rel)
        frac = (1.0 - s)[:, None] * w[inv]
        r = np.einsum("nij,njk->nik", self.rotations[j + 1], so3_exp(frac))
        p = (1.0 - s)[:, None] * self.translations[j] + s[:, None] * self.translations[j + 1]
        # Keyframe queries must reproduce keyframes exactly, not to roundoff.
        at_end = s == 1.0
        if np.any(at_end):
            r[at_end] = self.rotations[j[at_end] + 1]
        at_start = s == 0.0
        if np.any(at_start):
            r[at_start] = self.rotations[j[at_start]]
        return r, p

    def pose_at(self, time: float) -> RigidTransform:
        r, p = self.poses_at(np.array([time]))
        return RigidTransform(r[0], p[0])

    def copy(self) -> "BodyTrajectory":
        return BodyTrajectory(self.times.copy(), self.rotations.copy(), self.translations.copy())

    def segment_twists(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-segment (angular, linear) velocities in world coordinates, per second."""
        dt = np.diff(self.times)
        rel = np.einsum("nji,njk->nik", self.rotations[1:], self.rotations[:-1])
        w = -so3_log(rel) / dt[:, None]
        v = np.diff(self.translations, axis=0) / dt[:, None]
        return w, v
