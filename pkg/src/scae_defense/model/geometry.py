"""Affine pose helpers shared by the part and object capsules.

A pose is a 6-vector ``(scale_x, scale_y, shear, rotation, t_x, t_y)``. It maps
to the 2x3 matrix ``[R(rotation) @ [[1, shear], [0, 1]] @ diag(scale) | t]``
acting on normalized canvas coordinates in ``[-1, 1]``. The identity pose is
``(1, 1, 0, 0, 0, 0)``.
"""
import math

import torch

IDENTITY_POSE = (1.0, 1.0, 0.0, 0.0, 0.0, 0.0)

MIN_SCALE = 1.0 / 3.0
MAX_SCALE = 3.0
MAX_SHEAR = 0.5


def decode_pose(raw):
    """Squash unconstrained network outputs ``[..., 6]`` into a valid pose.

    Scales land in ``(1/3, 3)`` so every warp stays invertible; a zero raw
    vector decodes to the identity pose.
    """
    sx, sy, shear, rot, tx, ty = raw.unbind(-1)
    log_range = math.log(MAX_SCALE)
    return torch.stack([
        torch.exp(torch.tanh(sx) * log_range),
        torch.exp(torch.tanh(sy) * log_range),
        torch.tanh(shear) * MAX_SHEAR,
        torch.tanh(rot) * math.pi,
        torch.tanh(tx),
        torch.tanh(ty),
    ], dim=-1)


def pose_to_matrix(pose):
    """``[..., 6]`` pose -> ``[..., 2, 3]`` affine matrix."""
    sx, sy, shear, rot, tx, ty = pose.unbind(-1)
    c, s = torch.cos(rot), torch.sin(rot)
    # R @ Shear @ diag(sx, sy)
    a11 = c * sx
    a12 = (c * shear - s) * sy
    a21 = s * sx
    a22 = (s * shear + c) * sy
    row1 = torch.stack([a11, a12, tx], dim=-1)
    row2 = torch.stack([a21, a22, ty], dim=-1)
    return torch.stack([row1, row2], dim=-2)


def to_homogeneous(mat):
    """``[..., 2, 3]`` -> ``[..., 3, 3]`` by appending ``[0, 0, 1]``."""
    bottom = torch.zeros(mat.shape[:-2] + (1, 3), dtype=mat.dtype, device=mat.device)
    bottom[..., 0, 2] = 1.0
    return torch.cat([mat, bottom], dim=-2)


def compose(outer, inner):
    """Compose two ``[..., 2, 3]`` affines: apply ``inner`` first, then ``outer``."""
    return (to_homogeneous(outer) @ to_homogeneous(inner))[..., :2, :]


def invert_affine(mat):
    """Closed-form inverse of ``[..., 2, 3]`` affine matrices."""
    a, b, tx = mat[..., 0, 0], mat[..., 0, 1], mat[..., 0, 2]
    c, d, ty = mat[..., 1, 0], mat[..., 1, 1], mat[..., 1, 2]
    det = a * d - b * c
    ia, ib = d / det, -b / det
    ic, id_ = -c / det, a / det
    itx = -(ia * tx + ib * ty)
    ity = -(ic * tx + id_ * ty)
    row1 = torch.stack([ia, ib, itx], dim=-1)
    row2 = torch.stack([ic, id_, ity], dim=-1)
    return torch.stack([row1, row2], dim=-2)
