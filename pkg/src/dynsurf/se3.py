"""Rigid-transform algebra and constant-velocity pose interpolation.

The interpolation kernel deliberately splits rotation and translation:
rotation follows the geodesic on SO(3) while translation interpolates
linearly. The two differ from the full SE(3) exponential whenever the
rotation is nonzero, and the split form is the one the rest of the
pipeline (deskewing, trajectories, the simulator) is built on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AmbiguousRotationError

# Rotations this close to pi are rejected: the axis is numerically ambiguous.
NEAR_PI_MARGIN = 1e-7

_ORTHO_TOL = 1e-8


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    return a


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid transform: x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tra = _as_vec3(self.translation)
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > _ORTHO_TOL or np.linalg.det(rot) < 0.0:
            raise ValueError(f"rotation is not orthonormal with det +1 (error {err:.3e})")
        rot.flags.writeable = False
        tra.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return RigidTransform(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def invert(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0.0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        )

    def to_json(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(9)],
            "translation": [float(v) for v in self.translation],
        }

    @staticmethod
    def from_json(obj: dict) -> "RigidTransform":
        rot = np.asarray(obj["rotation"], dtype=np.float64).reshape(3, 3)
        return RigidTransform(rot, obj["translation"])


IDENTITY = RigidTransform.identity()


@dataclass(frozen=True)
class Twist:
    """Constant-velocity parameters of a relative transform.

    ``angular`` is the axis-angle vector of the relative rotation, ``linear``
    the relative translation. Scaling a twist by s in [0, 1] and
    re-exponentiating yields the split interpolation used everywhere here.
    """

    angular: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "angular", _as_vec3(self.angular))
        object.__setattr__(self, "linear", _as_vec3(self.linear))

    @staticmethod
    def from_relative(delta: RigidTransform) -> "Twist":
        return Twist(log_rotation(delta.rotation), delta.translation)

    def scaled(self, s: float) -> RigidTransform:
        return RigidTransform(exp_rotation(self.angular * s), self.linear * s)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.invert()


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula, batched: (..., 3) axis-angle -> (..., 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    theta = np.linalg.norm(w, axis=-1)
    # Guard the axis division; the small-angle branch ignores it anyway.
    safe = np.where(theta > 0.0, theta, 1.0)
    axis = w / safe[..., None]
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [
            np.stack([zero, -z, y], -1),
            np.stack([z, zero, -x], -1),
            np.stack([-y, x, zero], -1),
        ],
        -2,
    )
    k2 = k @ k
    small = theta < 1e-8
    sin_t = np.where(small, theta, np.sin(theta))
    cos_c = np.where(small, 0.5 * theta**2, 1.0 - np.cos(theta))
    eye = np.broadcast_to(np.eye(3), k.shape)
    # For tiny angles fall back to I + hat(w) + hat(w)^2 / 2 directly on w.
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    kw = np.stack(
        [
            np.stack([zero, -wz, wy], -1),
            np.stack([wz, zero, -wx], -1),
            np.stack([-wy, wx, zero], -1),
        ],
        -2,
    )
    r_small = eye + kw + 0.5 * (kw @ kw)
    r_full = eye + sin_t[..., None, None] * k + cos_c[..., None, None] * k2
    out = np.where(small[..., None, None], r_small, r_full)
    return out[0] if single else out


def _quat_from_rotation(r: np.ndarray) -> np.ndarray:
    """Unit quaternions (w, x, y, z) with w >= 0 from (..., 3, 3) matrices."""
    r = np.asarray(r, dtype=np.float64)
    m00, m01, m02 = r[..., 0, 0], r[..., 0, 1], r[..., 0, 2]
    m10, m11, m12 = r[..., 1, 0], r[..., 1, 1], r[..., 1, 2]
    m20, m21, m22 = r[..., 2, 0], r[..., 2, 1], r[..., 2, 2]
    tr = m00 + m11 + m22

    # Four pivot choices; each is numerically stable when its pivot dominates.
    with np.errstate(invalid="ignore", divide="ignore"):
        s0 = np.sqrt(np.maximum(tr + 1.0, 0.0)) * 2.0
        q0 = np.stack([0.25 * s0, (m21 - m12) / s0, (m02 - m20) / s0, (m10 - m01) / s0], -1)
        s1 = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0)) * 2.0
        q1 = np.stack([(m21 - m12) / s1, 0.25 * s1, (m01 + m10) / s1, (m02 + m20) / s1], -1)
        s2 = np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 0.0)) * 2.0
        q2 = np.stack([(m02 - m20) / s2, (m01 + m10) / s2, 0.25 * s2, (m12 + m21) / s2], -1)
        s3 = np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 0.0)) * 2.0
        q3 = np.stack([(m10 - m01) / s3, (m02 + m20) / s3, (m12 + m21) / s3, 0.25 * s3], -1)

    pivot = np.argmax(np.stack([tr, m00, m11, m22], -1), axis=-1)
    q = np.choose(pivot[..., None], [q0, q1, q2, q3])
    q = np.where(q[..., :1] < 0.0, -q, q)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def so3_log(r: np.ndarray, *, reject_near_pi: bool = True) -> np.ndarray:
    """Axis-angle vectors from rotation matrices, batched.

    The returned magnitude is the rotation angle in [0, pi]. Angles within
    NEAR_PI_MARGIN of pi raise AmbiguousRotationError unless disabled.
    """
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 2
    q = _quat_from_rotation(r[None] if single else r)
    vec = q[..., 1:]
    vn = np.linalg.norm(vec, axis=-1)
    angle = 2.0 * np.arctan2(vn, q[..., 0])
    if reject_near_pi and np.any(angle > np.pi - NEAR_PI_MARGIN):
        raise AmbiguousRotationError(
            "rotation angle within 1e-7 of pi; axis is ambiguous, subdivide the interval"
        )
    small = vn < 1e-12
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, vn))
    out = vec * scale[..., None]
    return out.reshape(3) if single else out


def exp_rotation(w) -> np.ndarray:
    """Axis-angle 3-vector -> 3x3 rotation matrix."""
    return so3_exp(_as_vec3(w))


def log_rotation(r) -> np.ndarray:
    """3x3 rotation -> axis-angle 3-vector with magnitude in [0, pi)."""
    return so3_log(np.asarray(r, dtype=np.float64).reshape(3, 3))


def interp_relative(delta: RigidTransform, s: float) -> RigidTransform:
    """Fraction s of a relative transform: geodesic rotation, linear translation.

    interp_relative(delta, 0) is the identity and interp_relative(delta, 1)
    is delta itself. Rotation angles of pi or more are rejected.
    """
    w = log_rotation(delta.rotation)
    return RigidTransform(exp_rotation(w * s), delta.translation * s)


def continuous_ego_pose(
    t_e0_to_w: RigidTransform, t_e1_to_w: RigidTransform, t: float
) -> RigidTransform:
    """Sensor pose at fraction t of the sweep, from the bracketing keyframes.

    The motion model holds the world-frame velocity constant between the
    keyframes: the pose at t is the end keyframe composed with the scaled
    relative transform of the start keyframe seen from the end keyframe.
    t = 0 reproduces the start keyframe, t = 1 the end keyframe.
    """
    delta = t_e1_to_w.invert().compose(t_e0_to_w)
    return t_e1_to_w.compose(interp_relative(delta, 1.0 - t))


def continuous_object_pose(
    t_e0_to_o0: RigidTransform,
    t_e1_to_o1: RigidTransform,
    t_w_to_e0: RigidTransform,
    t_w_to_e1: RigidTransform,
    t: float,
    *,
    already_ego_deskewed: bool = False,
) -> RigidTransform:
    """Ego-to-object transform at fraction t for a rigidly moving object.

    The constant-velocity assumption is applied to the object's motion with
    respect to the world, not the moving sensor: the object's world pose is
    interpolated exactly like the ego pose, then combined with the ego pose
    at t. When the input points were already deskewed into the end-of-sweep
    ego frame, pass already_ego_deskewed=True and the trailing ego
    interpolation factor is omitted.
    """
    obj0_to_w = t_w_to_e0.invert().compose(t_e0_to_o0.invert())  # o_0 -> w
    obj1_to_w = t_w_to_e1.invert().compose(t_e1_to_o1.invert())  # o_1 -> w
    obj_t_to_w = continuous_ego_pose(obj0_to_w, obj1_to_w, t)
    if already_ego_deskewed:
        ego_t_to_w = t_w_to_e1.invert()
    else:
        ego_t_to_w = continuous_ego_pose(t_w_to_e0.invert(), t_w_to_e1.invert(), t)
    return obj_t_to_w.invert().compose(ego_t_to_w)


def rotate_points(rotations: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply per-point rotations: (N, 3, 3) x (N, 3) -> (N, 3)."""
    return np.einsum("nij,nj->ni", rotations, points)


def transform_points(rotations: np.ndarray, translations: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply per-point rigid transforms: (N, 3, 3), (N, 3) x (N, 3) -> (N, 3)."""
    return np.einsum("nij,nj->ni", rotations, points) + translations


def inverse_transform_points(
    rotations: np.ndarray, translations: np.ndarray, points: np.ndarray
) -> np.ndarray:
    """Apply the inverse of per-point rigid transforms to points."""
    return np.einsum("nji,nj->ni", rotations, points - translations)


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrices via normalized quaternions."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )
