"""2D affine poses stored as offsets from the identity.

A pose offset ``A`` is a 2x3 matrix; the transform it denotes is the
homogeneous 3x3 matrix ``I + A`` with bottom row ``[0, 0, 1]``.  The tensor
functions here accept any leading batch dimensions ``(..., 2, 3)``.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SINGULAR_TOL = 1e-9
_I23 = np.eye(2, 3)


class SingularPoseError(ValueError):
    pass


def realized(offset) -> np.ndarray:
    """3x3 homogeneous matrix for a (possibly batched) 2x3 offset array."""
    offset = np.asarray(offset, dtype=np.float64)
    out = np.zeros(offset.shape[:-2] + (3, 3))
    out[..., :2, :] = offset + _I23
    out[..., 2, 2] = 1.0
    return out


def offset_from_realized(matrix) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    return matrix[..., :2, :] - _I23


def linear_det(offset) -> np.ndarray:
    m = np.asarray(offset, dtype=np.float64) + _I23
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def check_invertible(offset, what: str = "pose") -> None:
    det = linear_det(offset.data if isinstance(offset, Tensor) else offset)
    if np.any(np.abs(det) < SINGULAR_TOL):
        raise SingularPoseError(f"{what} is singular (|det| < {SINGULAR_TOL})")


def compose_offsets(parent, child) -> Tensor:
    """Offset of realized(parent) @ realized(child), differentiable in both."""
    parent, child = ad.as_tensor(parent), ad.as_tensor(child)
    lin_p = parent[..., :, :2] + np.eye(2)
    lin_c = child[..., :, :2] + np.eye(2)
    lin = ad.matmul(lin_p, lin_c) - np.eye(2)
    trans = ad.matmul(lin_p, child[..., :, 2:3]) + parent[..., :, 2:3]
    return ad.concatenate([lin, trans], axis=-1)


def invert_offsets(offset) -> Tensor:
    """Offset of the inverse transform, via the 2x2 adjugate."""
    offset = ad.as_tensor(offset)
    check_invertible(offset)
    a = offset[..., 0, 0] + 1.0
    b = offset[..., 0, 1]
    c = offset[..., 1, 0]
    d = offset[..., 1, 1] + 1.0
    tx = offset[..., 0, 2]
    ty = offset[..., 1, 2]
    det = a * d - b * c
    ia, ib, ic, id_ = d / det, -b / det, -c / det, a / det
    itx = -(ia * tx + ib * ty)
    ity = -(ic * tx + id_ * ty)
    row0 = ad.stack([ia - 1.0, ib, itx], axis=-1)
    row1 = ad.stack([ic, id_ - 1.0, ity], axis=-1)
    return ad.stack([row0, row1], axis=-2)


def apply_to_points(offset, x, y):
    """Map point coordinates through realized(offset); returns (x', y')."""
    offset = ad.as_tensor(offset)
    xo = (offset[..., 0, 0] + 1.0) * x + offset[..., 0, 1] * y + offset[..., 0, 2]
    yo = offset[..., 1, 0] * x + (offset[..., 1, 1] + 1.0) * y + offset[..., 1, 2]
    return xo, yo


class PoseTransform:
    """Immutable 2D affine pose held as its offset from the identity."""

    __slots__ = ("_offset",)

    def __init__(self, offset=None):
        arr = np.zeros((2, 3)) if offset is None else np.array(offset, dtype=np.float64)
        if arr.shape != (2, 3):
            raise ValueError(f"pose offset must be 2x3, got {arr.shape}")
        arr.setflags(write=False)
        self._offset = arr

    @classmethod
    def identity(cls) -> "PoseTransform":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "PoseTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape == (3, 3) and not np.allclose(matrix[2], [0.0, 0.0, 1.0]):
            raise ValueError("homogeneous affine matrix must have bottom row [0, 0, 1]")
        return cls(matrix[:2, :] - _I23)

    @property
    def offset(self) -> np.ndarray:
        return self._offset

    def realized(self) -> np.ndarray:
        return realized(self._offset)

    @property
    def det(self) -> float:
        return float(linear_det(self._offset))

    @property
    def translation(self) -> np.ndarray:
        return self._offset[:, 2].copy()

    @property
    def angle(self) -> float:
        return rotation_angle(self._offset)

    def is_invertible(self) -> bool:
        return abs(self.det) >= SINGULAR_TOL

    def compose(self, other: "PoseTransform") -> "PoseTransform":
        return compose(self, other)

    def inverse(self) -> "PoseTransform":
        return invert(self)

    def __matmul__(self, other: "PoseTransform") -> "PoseTransform":
        return compose(self, other)

    def __eq__(self, other) -> bool:
        return isinstance(other, PoseTransform) and np.array_equal(self._offset, other._offset)

    def __hash__(self):
        return hash(self._offset.tobytes())

    def allclose(self, other: "PoseTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self._offset, other._offset, rtol=0.0, atol=atol))

    def __repr__(self) -> str:
        return f"PoseTransform({self._offset.tolist()})"


def compose(parent: PoseTransform, offset: PoseTransform) -> PoseTransform:
    """Pose whose realized matrix is realized(parent) @ realized(offset)."""
    return PoseTransform(compose_offsets(parent.offset, offset.offset).data)


def invert(a: PoseTransform) -> PoseTransform:
    if not a.is_invertible():
        raise SingularPoseError("cannot invert a singular pose")
    return PoseTransform(invert_offsets(a.offset).data)


def make_pose(tx=0.0, ty=0.0, angle=0.0, scale_x=1.0, scale_y=1.0, shear=0.0) -> PoseTransform:
    """Pose realizing T(tx, ty) @ R(angle) @ Shear(shear) @ Scale(sx, sy).

    ``angle`` is in radians, counter-clockwise in (x, y) coordinates; the
    shear matrix is ``[[1, shear], [0, 1]]``.
    """
    if scale_x == 0 or scale_y == 0:
        raise ValueError("make_pose: scales must be non-zero")
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    sc = np.diag([scale_x, scale_y])
    m = np.eye(3)
    m[:2, :2] = rot @ sh @ sc
    m[:2, 2] = (tx, ty)
    return PoseTransform.from_matrix(m)


def rotation_angle(offset) -> np.ndarray | float:
    """Angle of the rotation nearest to the linear part (polar decomposition)."""
    m = np.asarray(offset, dtype=np.float64) + _I23
    ang = np.arctan2(m[..., 1, 0] - m[..., 0, 1], m[..., 0, 0] + m[..., 1, 1])
    return float(ang) if np.ndim(ang) == 0 else ang


def make_offsets(tx, ty, angle=0.0, scale=1.0) -> np.ndarray:
    """Vectorised similarity-transform offsets (broadcast over inputs)."""
    tx, ty, angle, scale = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (tx, ty, angle, scale)))
    out = np.zeros(tx.shape + (2, 3))
    c, s = np.cos(angle) * scale, np.sin(angle) * scale
    out[..., 0, 0] = c - 1.0
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c - 1.0
    out[..., 0, 2] = tx
    out[..., 1, 2] = ty
    return out
