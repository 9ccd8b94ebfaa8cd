"""Poses, quaternion algebra and pose error metrics.

Quaternions are stored as ``(w, x, y, z)``. Array-valued helpers broadcast
over leading axes, so the same functions serve single poses and batches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NearZeroQuaternion, NotUnitQuaternion

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise NearZeroQuaternion(f"cannot normalize quaternion with norm {n.min():g}")
    return q / n


def quat_multiply(a, b):
    """Hamilton product ``a ⊗ b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, v):
    """Rotate vector(s) ``v`` by unit quaternion(s) ``q``."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_slerp(q0, q1, s):
    """Spherical interpolation along the shorter arc; ``s`` may be an array."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)[..., None]
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    if d > 1.0 - 1e-10:
        return quat_normalize(q0 + s * (q1 - q0))
    omega = np.arccos(d)
    so = np.sin(omega)
    return (np.sin((1.0 - s) * omega) * q0 + np.sin(s * omega) * q1) / so


def position_error(a, b):
    """Euclidean distance in meters; broadcasts over leading axes."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sqrt(np.sum(d * d, axis=-1))


def orientation_error_deg(q1, q2):
    """Geodesic angle between two unit quaternions, in degrees within [0, 180]."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    for q in (q1, q2):
        n = np.linalg.norm(q, axis=-1)
        if np.any(np.abs(n - 1.0) > 1e-6):
            raise NotUnitQuaternion("orientation error needs unit quaternions")
    # 2*arccos|<q1,q2>| rewritten in half-angle form: exact at q2 = ±q1 and
    # well conditioned for small angles
    sign = np.where(np.sum(q1 * q2, axis=-1) < 0, -1.0, 1.0)[..., None]
    q2 = sign * q2
    d = np.linalg.norm(q1 - q2, axis=-1)
    s = np.linalg.norm(q1 + q2, axis=-1)
    return np.degrees(4.0 * np.arctan2(d, s))


@dataclass(frozen=True, eq=False)
class Pose:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("pose position must be finite")
        q = np.array(self.orientation, dtype=np.float64).reshape(4)
        # Leave already-unit quaternions bit-untouched.
        if abs(np.linalg.norm(q) - 1.0) > 1e-12:
            q = quat_normalize(q)
        p.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.zeros(3), IDENTITY_QUAT)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    @classmethod
    def from_vector(cls, v) -> Pose:
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:7])

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.position, other.position)
            and np.array_equal(self.orientation, other.orientation)
        )

    def __repr__(self):
        return f"Pose(position={self.position.tolist()}, orientation={self.orientation.tolist()})"


def compose(a: Pose, rel: Pose) -> Pose:
    """Apply ``rel`` expressed in the frame of ``a``."""
    q = quat_multiply(a.orientation, rel.orientation)
    p = a.position + quat_rotate(a.orientation, rel.position)
    return Pose(p, q)


def relative(a: Pose, b: Pose) -> Pose:
    """The pose ``rel`` such that ``compose(a, rel) == b``."""
    qa_inv = quat_conjugate(a.orientation)
    q = quat_multiply(qa_inv, b.orientation)
    p = quat_rotate(qa_inv, b.position - a.position)
    return Pose(p, q)


def random_unit_vectors(rng: np.random.Generator, n=None):
    size = (3,) if n is None else (n, 3)
    v = rng.standard_normal(size)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def perturb_pose(p: Pose, sigma_t: float, sigma_r: float, rng: np.random.Generator) -> Pose:
    """Gaussian position noise plus a rotation about a random axis.

    The rotation angle is drawn from N(0, sigma_r^2) degrees and clamped to
    [-180, 180]. Random draws are consumed even when a sigma is zero so that
    streams stay aligned across noise levels.
    """
    if sigma_t < 0 or sigma_r < 0:
        raise ValueError("noise scales must be non-negative")
    dt = rng.standard_normal(3) * sigma_t
    axis = random_unit_vectors(rng)
    angle = float(np.clip(rng.standard_normal() * sigma_r, -180.0, 180.0))
    position = p.position + dt if sigma_t > 0 else p.position
    if sigma_r > 0:
        dq = quat_from_axis_angle(axis, np.radians(angle))
        orientation = quat_normalize(quat_multiply(dq, p.orientation))
    else:
        orientation = p.orientation
    return Pose(position, orientation)
