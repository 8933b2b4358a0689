"""Joint parameterization and rigid transforms for part poses.

All functions take tensors (or arrays) with arbitrary leading batch dimensions
and stay differentiable, so the same code serves the network forward pass and
the numpy-side data generation and evaluation.

Conventions:

* Euler residuals are extrinsic rotations about X, then Y, then Z, i.e. the
  matrix is ``Rz @ Ry @ Rx``.
* A revolute joint rotates about the line through its pivot ``q`` with
  direction ``u``: ``x -> R(s, u) (x - q) + q``. At ``s = 0`` it is the identity
  for any pivot.
* A prismatic joint translates by ``s * u``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import Tensor, as_tensor, broadcast_to, stack

UNIT_TOL = 1e-6


class JointKind(str, Enum):
    FIXED = "fixed"
    PRISMATIC = "prismatic"
    REVOLUTE = "revolute"


def _entries_to_matrix(entries: list[Tensor]) -> Tensor:
    flat = stack(entries, axis=-1)
    return flat.reshape(flat.shape[:-1] + (3, 3))


def euler_matrix(r) -> Tensor:
    """Rotation matrix ``Rz(r_z) Ry(r_y) Rx(r_x)`` for Euler angles ``r[..., :3]``."""
    r = as_tensor(r)
    a, b, c = r[..., 0], r[..., 1], r[..., 2]
    ca, sa = a.cos(), a.sin()
    cb, sb = b.cos(), b.sin()
    cc, sc = c.cos(), c.sin()
    return _entries_to_matrix([
        cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa,
        sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa,
        -sb, cb * sa, cb * ca,
    ])


def axis_angle_matrix(angle, axis) -> Tensor:
    """Rodrigues' formula for a rotation by ``angle`` about unit ``axis``."""
    angle = as_tensor(angle)
    axis = as_tensor(axis)
    c, s = angle.cos(), angle.sin()
    k = 1.0 - c
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    return _entries_to_matrix([
        c + k * x * x, k * x * y - s * z, k * x * z + s * y,
        k * y * x + s * z, c + k * y * y, k * y * z - s * x,
        k * z * x - s * y, k * z * y + s * x, c + k * z * z,
    ])


def _check_unit(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (3,) or abs(np.linalg.norm(e) - 1.0) > UNIT_TOL:
        raise ValueError(f"initial joint direction must be a unit 3-vector, got {e}")
    return e


def joint_direction(e, r) -> Tensor:
    """Rotate the constant unit direction ``e`` by the Euler residual ``r``."""
    e = _check_unit(e)
    rot = euler_matrix(r)
    return (rot * Tensor(e.astype(rot.dtype))).sum(axis=-1)


@dataclass
class RigidTransform:
    """Rotation block and translation of a homogeneous transform.

    ``rotation`` has shape ``(..., 3, 3)`` and ``translation`` ``(..., 3)``.
    """

    rotation: Tensor
    translation: Tensor

    @classmethod
    def identity(cls, batch_shape: tuple = (), dtype=np.float64) -> "RigidTransform":
        rot = np.broadcast_to(np.eye(3, dtype=dtype), tuple(batch_shape) + (3, 3)).copy()
        return cls(Tensor(rot), Tensor(np.zeros(tuple(batch_shape) + (3,), dtype=dtype)))

    @property
    def batch_shape(self) -> tuple:
        return self.rotation.shape[:-2]

    def matrix(self) -> np.ndarray:
        """Row-major 4x4 homogeneous matrices, shape ``(..., 4, 4)``."""
        out = np.zeros(self.batch_shape + (4, 4), dtype=self.rotation.dtype)
        out[..., :3, :3] = self.rotation.data
        out[..., :3, 3] = self.translation.data
        out[..., 3, 3] = 1.0
        return out

    def _translation_like(self, x: Tensor) -> Tensor:
        if self.rotation.ndim == 2:
            return self.translation
        t = self.translation.reshape(self.batch_shape + (1, 3))
        return broadcast_to(t, x.shape)

    def apply(self, x) -> Tensor:
        """``R x + t`` for a batch of points ``(..., P, 3)``."""
        x = as_tensor(x)
        return x @ self.rotation.swap_last() + self._translation_like(x)

    def inverse_apply(self, x) -> Tensor:
        """``R^T (x - t)`` for a batch of points ``(..., P, 3)``."""
        x = as_tensor(x)
        return (x - self._translation_like(x)) @ self.rotation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``."""
        rot = self.rotation @ other.rotation
        return RigidTransform(rot, matvec(self.rotation, other.translation) + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.swap_last()
        return RigidTransform(rt, -matvec(rt, self.translation))


def matvec(m: Tensor, v: Tensor) -> Tensor:
    """Batched ``m @ v`` for ``m`` of shape ``(..., 3, 3)`` and ``v`` of shape ``(..., 3)``."""
    out = as_tensor(m) @ as_tensor(v).reshape(v.shape + (1,))
    return out.reshape(v.shape)


@dataclass
class JointParams:
    """Joint parameters of one part.

    ``s`` may carry a batch shape; the 3-vectors then carry the same batch shape
    plus a trailing 3. Residuals default to zero.
    """

    e: np.ndarray
    s: Tensor
    r_c: Tensor | None = None
    r_z: Tensor | None = None
    q_c: Tensor | None = None
    q_z: Tensor | None = None
    _u: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        self.e = _check_unit(self.e)
        self.s = as_tensor(self.s)
        if np.any(self.s.data < 0):
            raise ValueError("joint state must be non-negative")
        zeros = Tensor(np.zeros(self.s.shape + (3,), dtype=self.s.dtype))
        self.r_c = zeros if self.r_c is None else as_tensor(self.r_c)
        self.r_z = zeros if self.r_z is None else as_tensor(self.r_z)
        self.q_c = zeros if self.q_c is None else as_tensor(self.q_c)
        self.q_z = zeros if self.q_z is None else as_tensor(self.q_z)

    @property
    def r(self) -> Tensor:
        return self.r_c + self.r_z

    @property
    def q(self) -> Tensor:
        return self.q_c + self.q_z

    @property
    def u(self) -> Tensor:
        if self._u is None:
            self._u = joint_direction(self.e, self.r)
        return self._u


def pose_from_direction(kind: JointKind, s, u, q=None) -> RigidTransform:
    """Part pose from an already-resolved direction ``u`` (and pivot ``q``)."""
    kind = JointKind(kind)
    s = as_tensor(s)
    u = as_tensor(u)
    batch = u.shape[:-1]
    if kind is JointKind.FIXED:
        return RigidTransform.identity(batch, dtype=u.dtype)
    if kind is JointKind.PRISMATIC:
        rot = RigidTransform.identity(batch, dtype=u.dtype).rotation
        return RigidTransform(rot, u * broadcast_to(s.reshape(batch + (1,)), u.shape))
    rot = axis_angle_matrix(s, u)
    q = as_tensor(q)
    return RigidTransform(rot, q - matvec(rot, q))


def compose_part_pose(kind: JointKind, p: JointParams | None = None) -> RigidTransform:
    """Part pose ``B`` for a joint kind and its parameters."""
    kind = JointKind(kind)
    if kind is JointKind.FIXED:
        batch = p.s.shape if p is not None else ()
        return RigidTransform.identity(batch)
    return pose_from_direction(kind, p.s, p.u, p.q)


def inverse_apply(b: RigidTransform, x) -> Tensor:
    return b.inverse_apply(x)


def apply(b: RigidTransform, x) -> Tensor:
    return b.apply(x)


# -- numpy helpers for data generation and evaluation -------------------------
def rotation_about(angle: float, axis) -> np.ndarray:
    return axis_angle_matrix(np.float64(angle), np.asarray(axis, dtype=np.float64)).data


def line_distance(p1, d1, p2, d2) -> float:
    """Closest-approach distance between two 3-D lines (handles parallel lines)."""
    p1, d1, p2, d2 = (np.asarray(v, dtype=np.float64) for v in (p1, d1, p2, d2))
    d1 = d1 / np.linalg.norm(d1)
    d2 = d2 / np.linalg.norm(d2)
    n = np.cross(d1, d2)
    w = p2 - p1
    nn = np.linalg.norm(n)
    if nn < 1e-12:
        return float(np.linalg.norm(w - np.dot(w, d1) * d1))
    return float(abs(np.dot(w, n)) / nn)


def direction_error_deg(u_pred, u_gt) -> float:
    """Angle between two directions, folded to [0, 90] since the sign is unobservable."""
    a = np.asarray(u_pred, dtype=np.float64)
    b = np.asarray(u_gt, dtype=np.float64)
    cos = abs(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(np.clip(cos, 0.0, 1.0))))
