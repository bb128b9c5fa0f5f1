"""Rotation and rigid-transform primitives for the shaft-constraint controller.

Conventions: rotation matrices are 3x3 numpy arrays acting on column vectors,
frames are right-handed, angles are radians everywhere inside the library.
The tool shaft is the +z axis of the tool frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ROTATION_TOL = 1e-9
_SMALL_ANGLE = 1e-8


class InvalidRotationError(ValueError):
    """Input matrix is not a proper rotation (orthonormal, det +1)."""


class DegenerateGeometryError(ValueError):
    """Geometric construction is undefined for the given inputs."""


def skew(w):
    """Skew-symmetric matrix such that skew(w) @ v == cross(w, v)."""
    wx, wy, wz = w
    return np.array([
        [0.0, -wz, wy],
        [wz, 0.0, -wx],
        [-wy, wx, 0.0],
    ])


def is_rotation(r, tol=ROTATION_TOL):
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(r) - 1.0) <= tol


def ensure_rotation(r, tol=ROTATION_TOL):
    r = np.asarray(r, dtype=float)
    if not is_rotation(r, tol):
        raise InvalidRotationError("matrix is not orthonormal with det +1")
    return r


def so3_exp(w):
    """Rodrigues map from an axis-angle vector to a rotation matrix.

    Angles below 1e-8 rad use the first-order expansion I + skew(w), which is
    exact to double precision at that scale.
    """
    w = np.asarray(w, dtype=float)
    angle = float(np.linalg.norm(w))
    if angle < _SMALL_ANGLE:
        return np.eye(3) + skew(w)
    axis = w / angle
    k = skew(axis)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def so3_log(r):
    """Axis-angle vector of a rotation matrix; magnitude in [0, pi].

    The angle comes from atan2 of the skew-part norm against the trace, which
    stays well-conditioned at every angle; near pi the axis is extracted from
    R + I instead of the vanishing skew part. At exactly pi the axis sign is
    ambiguous and is canonicalized (first nonzero component positive) so
    replays are reproducible.

    Raises:
        InvalidRotationError: input fails the orthonormality/det check.
    """
    r = ensure_rotation(r)
    cos_angle = min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))
    # v = sin(angle) * axis
    v = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_angle = float(np.linalg.norm(v))
    angle = math.atan2(sin_angle, cos_angle)
    if angle < _SMALL_ANGLE:
        return v
    if math.pi - angle < 1e-5:
        # near pi: dominant diagonal of (R + I)/2 gives a stable axis; the
        # symmetrized off-diagonals cancel the vanishing skew part, leaving
        # O((pi - angle)^2) axis error, ~1e-11 at this threshold
        # (the skew-part route below amplifies noise by 1/sin(angle) instead)
        diag = np.diag(r)
        i = int(np.argmax(diag))
        axis = np.zeros(3)
        axis[i] = math.sqrt(max(0.0, (diag[i] + 1.0) / 2.0))
        denom = 2.0 * axis[i]
        j, k = [n for n in range(3) if n != i]
        axis[j] = (r[i, j] + r[j, i]) / (2.0 * denom)
        axis[k] = (r[i, k] + r[k, i]) / (2.0 * denom)
        axis /= np.linalg.norm(axis)
        align = float(axis @ v)
        if align < -1e-12:
            axis = -axis
        elif abs(align) <= 1e-12:
            for component in axis:
                if abs(component) > 1e-12:
                    if component < 0.0:
                        axis = -axis
                    break
        return axis * angle
    return (angle / sin_angle) * v


def rotation_error(rc, rd):
    """Axis-angle of the relative rotation log(rc^T rd), in the rc frame.

    Its norm is the geodesic angle between the two frames.
    """
    rc = ensure_rotation(rc)
    rd = ensure_rotation(rd)
    return so3_log(rc.T @ rd)


def _perpendicular(axis):
    # Smallest-index deterministic choice: orthogonalize the first basis
    # vector that is not (anti)parallel to the input.
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        candidate = e - float(np.dot(e, axis)) * axis
        n = np.linalg.norm(candidate)
        if n > 1e-6:
            return candidate / n
    raise DegenerateGeometryError("no perpendicular axis found")


def align_axis(current_axis, target_axis):
    """Minimal-angle rotation taking one unit vector onto another.

    Antiparallel inputs get a deterministic 180-degree rotation about the
    smallest-index perpendicular axis so repeated runs agree bit for bit.

    Raises:
        DegenerateGeometryError: an input is not unit length to 1e-9.
    """
    a = np.asarray(current_axis, dtype=float)
    b = np.asarray(target_axis, dtype=float)
    if abs(np.linalg.norm(a) - 1.0) > 1e-9 or abs(np.linalg.norm(b) - 1.0) > 1e-9:
        raise DegenerateGeometryError("align_axis expects unit vectors")
    c = np.cross(a, b)
    dot = float(np.dot(a, b))
    sin_angle = float(np.linalg.norm(c))
    if sin_angle < 1e-12:
        if dot > 0.0:
            return np.eye(3)
        return so3_exp(math.pi * _perpendicular(a))
    angle = math.atan2(sin_angle, dot)
    return so3_exp((angle / sin_angle) * c)


@dataclass
class RigidTransform:
    """Rotation plus translation (mm); the tip pose container."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = ensure_rotation(self.rotation)
        self.translation = np.asarray(self.translation, dtype=float)
        if self.translation.shape != (3,) or not np.all(np.isfinite(self.translation)):
            raise ValueError("translation must be a finite 3-vector")

    def apply(self, point):
        return self.rotation @ np.asarray(point, dtype=float) + self.translation
