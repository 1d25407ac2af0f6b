"""Rigid transforms and the continuous 6D rotation parametrization.

A Pose stores a rotation as two 3-vectors that are orthonormalized by
Gram-Schmidt, plus a translation. This parametrization has no angle
wrap-around or double-cover discontinuities, which keeps gradient-based
pose refinement well behaved.
"""

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError

_DEGENERATE_NORM = 1e-9


def rot6d_to_matrix(r6):
    """Gram-Schmidt two 3-vectors into a rotation matrix (columns b1,b2,b3)."""
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape != (6,):
        raise StructuralError(f"rot6d must have shape (6,), got {r6.shape}")
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    if n1 < _DEGENERATE_NORM:
        raise StructuralError("rot6d first vector is degenerate")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < _DEGENERATE_NORM:
        raise StructuralError("rot6d second vector is parallel to the first")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def matrix_to_rot6d(rot):
    """First two columns of a rotation matrix, flattened."""
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise StructuralError(f"rotation matrix must be 3x3, got {rot.shape}")
    return np.concatenate([rot[:, 0], rot[:, 1]])


def rot6d_backward(r6, grad_rot):
    """Adjoint of rot6d_to_matrix: maps dL/dR (3,3) to dL/dr6 (6,)."""
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    b2 = u2 / n2
    gb1 = np.array(grad_rot[:, 0], dtype=np.float64)
    gb2 = np.array(grad_rot[:, 1], dtype=np.float64)
    gb3 = np.asarray(grad_rot[:, 2], dtype=np.float64)
    # b3 = b1 x b2
    gb1 += np.cross(b2, gb3)
    gb2 += np.cross(gb3, b1)
    # b2 = u2 / ||u2||
    gu2 = (gb2 - (b2 @ gb2) * b2) / n2
    # u2 = a2 - (b1.a2) b1
    ga2 = gu2 - (b1 @ gu2) * b1
    gb1 += -(gu2 @ b1) * a2 - (b1 @ a2) * gu2
    # b1 = a1 / ||a1||
    ga1 = (gb1 - (b1 @ gb1) * b1) / n1
    return np.concatenate([ga1, ga2])


@dataclass
class Pose:
    """SE(3) transform: x_out = R x_in + t, R derived from rot6d."""

    rot6d: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rot6d = np.asarray(self.rot6d, dtype=np.float64).reshape(6)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0, 0, 0, 1.0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, rot, translation):
        return cls(matrix_to_rot6d(rot), np.asarray(translation, dtype=np.float64))

    def matrix(self):
        return rot6d_to_matrix(self.rot6d)

    def transform(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix().T + self.translation

    def inverse(self):
        rot = self.matrix()
        return Pose.from_matrix(rot.T, -rot.T @ self.translation)

    def compose(self, other):
        """self after other: (self @ other)(x) = self(other(x))."""
        r_s, r_o = self.matrix(), other.matrix()
        return Pose.from_matrix(r_s @ r_o, r_s @ other.translation + self.translation)

    def validate(self):
        rot = self.matrix()
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
            raise StructuralError("derived rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise StructuralError("derived rotation has determinant != +1")
        if not np.isfinite(self.translation).all():
            raise StructuralError("translation has non-finite entries")
        return self


def random_rotation(rng):
    """Uniform random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def rotation_about_axis(axis, angle_rad):
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    k = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-from-world pose for a pinhole camera at `eye` facing `target`.

    Camera convention: +z forward, +x right, +y down in the image.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < _DEGENERATE_NORM:
        raise StructuralError("camera eye coincides with target")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(up, fwd)) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])
        if np.linalg.norm(np.cross(up, fwd)) < 1e-6:
            up = np.array([1.0, 0.0, 0.0])
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)
    return Pose.from_matrix(rot, -rot @ eye)
