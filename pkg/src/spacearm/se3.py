"""Rigid-body transforms, twists and the SE(3) exponential map.

Conventions, used consistently by every module in this package:

* Twists are 6-vectors stacked [linear; angular].  Screw axes, Jacobian
  columns and adjoint matrices all follow this ordering.
* A pose g maps coordinates of its child frame into its parent frame:
  x_parent = R @ x_child + p.
* adjoint(g) re-expresses a twist written in the child frame in the parent
  frame (6x6, same stacking).
* exp_se3 uses the closed-form Rodrigues rotation plus the standard
  translation coupling matrix.  Rotation angles below SMALL_ANGLE switch to
  a second-order Taylor expansion of both blocks.
* Long chains of compositions accumulate round-off in the rotation block;
  project_rotation() snaps a drifted matrix back to SO(3) via its polar
  factor.  Integrators in this package re-project every
  REORTHONORMALIZE_EVERY compositions.

Numerical policy: structure checks (orthonormality, twist layout) use
STRUCTURE_TOL.  No SE(3) logarithm is provided; nothing here needs one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NotInLieAlgebra

SMALL_ANGLE = 1e-8
STRUCTURE_TOL = 1e-9
REORTHONORMALIZE_EVERY = 256


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _unskew(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True)
class Rotation:
    """Member of SO(3), stored as its 3x3 matrix."""

    r: np.ndarray

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    @staticmethod
    def from_matrix(m: np.ndarray, check: bool = True) -> "Rotation":
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise DimensionMismatch(f"rotation matrix must be 3x3, got {m.shape}")
        if check:
            err = np.abs(m.T @ m - np.eye(3)).max()
            if err > 1e-6 or np.linalg.det(m) < 0.0:
                raise DimensionMismatch(
                    f"matrix is not a proper rotation (orthonormality error {err:.2e})"
                )
        return Rotation(m)


@dataclass(frozen=True)
class Pose:
    """Member of SE(3): rotation plus translation of a child frame in its parent."""

    rotation: Rotation
    position: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_rp(r: np.ndarray, p: np.ndarray) -> "Pose":
        return Pose(Rotation(np.asarray(r, dtype=float)), np.asarray(p, dtype=float))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise DimensionMismatch(f"homogeneous matrix must be 4x4, got {m.shape}")
        return Pose(Rotation(m[:3, :3].copy()), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.r
        m[:3, 3] = self.position
        return m


@dataclass(frozen=True)
class Twist:
    """Instantaneous rigid motion, [linear; angular]."""

    linear: np.ndarray
    angular: np.ndarray

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vec(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=float)
        if v.shape != (6,):
            raise DimensionMismatch(f"twist vector must have shape (6,), got {v.shape}")
        return Twist(v[:3].copy(), v[3:].copy())

    @property
    def vec(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])


def _as_twist_vec(t) -> np.ndarray:
    if isinstance(t, Twist):
        return t.vec
    v = np.asarray(t, dtype=float)
    if v.shape != (6,):
        raise DimensionMismatch(f"twist must be a Twist or (6,) vector, got {v.shape}")
    return v


def hat(t) -> np.ndarray:
    """4x4 matrix form of a twist: [[skew(w), v], [0, 0]]."""
    v = _as_twist_vec(t)
    m = np.zeros((4, 4))
    m[:3, :3] = _skew(v[3:])
    m[:3, 3] = v[:3]
    return m


def vee(m: np.ndarray) -> Twist:
    """Inverse of hat().  Raises NotInLieAlgebra if m lacks twist structure."""
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise DimensionMismatch(f"expected a 4x4 matrix, got {m.shape}")
    top = m[:3, :3]
    if np.abs(top + top.T).max() > STRUCTURE_TOL or np.abs(m[3, :]).max() > STRUCTURE_TOL:
        raise NotInLieAlgebra("matrix is not in the se(3) subspace")
    return Twist(m[:3, 3].copy(), _unskew(top))


def _exp_rp(v: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential of the twist [v; w] (already scaled), as (R, p)."""
    theta = float(np.linalg.norm(w))
    wx = _skew(w)
    wx2 = wx @ wx
    if theta < SMALL_ANGLE:
        # Second-order Taylor branch; remainder is O(theta^3) ~ 1e-24.
        rot = np.eye(3) + wx + 0.5 * wx2
        trans_map = np.eye(3) + 0.5 * wx + wx2 / 6.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        rot = np.eye(3) + (s / theta) * wx + ((1.0 - c) / theta**2) * wx2
        trans_map = (
            np.eye(3)
            + ((1.0 - c) / theta**2) * wx
            + ((theta - s) / theta**3) * wx2
        )
    return rot, trans_map @ v


def exp_se3(t, dt: float = 1.0) -> Pose:
    """Pose reached by following a constant twist for dt.

    Also serves as the screw-axis exponential used by the kinematics: the
    scale is a plain multiplier on the twist, so joint angles of either sign
    are fine.
    """
    v = _as_twist_vec(t) * float(dt)
    r, p = _exp_rp(v[:3], v[3:])
    return Pose(Rotation(r), p)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose product a * b (apply b in a's child frame, then a)."""
    ra, rb = a.rotation.r, b.rotation.r
    return Pose(Rotation(ra @ rb), ra @ b.position + a.position)


def inverse(a: Pose) -> Pose:
    rt = a.rotation.r.T
    return Pose(Rotation(rt.copy()), -(rt @ a.position))


def adjoint(g: Pose) -> np.ndarray:
    """6x6 map taking child-frame twists to parent-frame twists."""
    r = g.rotation.r
    out = np.zeros((6, 6))
    out[:3, :3] = r
    out[3:, 3:] = r
    out[:3, 3:] = _skew(g.position) @ r
    return out


def skew_vee(r) -> np.ndarray:
    """vee of the antisymmetric part of a rotation matrix, 0.5 * (R - R^T)."""
    m = r.r if isinstance(r, Rotation) else np.asarray(r, dtype=float)
    if m.shape != (3, 3):
        raise DimensionMismatch(f"expected a 3x3 matrix, got {m.shape}")
    return _unskew(0.5 * (m - m.T))


def project_rotation(r) -> Rotation:
    """Nearest proper rotation (Frobenius sense) via the SVD polar factor."""
    m = r.r if isinstance(r, Rotation) else np.asarray(r, dtype=float)
    u, _, vt = np.linalg.svd(m)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return Rotation(out)
