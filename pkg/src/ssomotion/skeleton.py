"""22-joint kinematic skeleton with differentiable forward kinematics.

The rest pose faces +y with +x toward the subject's right and z up. Pose
vectors are 69 floats: root translation (3), global orientation (3, axis
angle) and 21 joint rotations (63, axis-angle).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

POSE_DIM = 69
NUM_JOINTS = 22

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)

FOOT_JOINTS = (7, 8, 10, 11)  # ankles and feet
PELVIS = 0

_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

_OFFSETS = np.array([
    [0.000, 0.000, 0.000],   # pelvis
    [-0.088, 0.000, -0.066],  # left_hip
    [0.088, 0.000, -0.066],   # right_hip
    [0.000, -0.015, 0.110],   # spine1
    [0.000, 0.000, -0.383],   # left_knee
    [0.000, 0.000, -0.383],   # right_knee
    [0.000, 0.005, 0.120],    # spine2
    [0.000, 0.000, -0.400],   # left_ankle
    [0.000, 0.000, -0.400],   # right_ankle
    [0.000, 0.005, 0.120],    # spine3
    [0.000, 0.120, -0.060],   # left_foot (toe)
    [0.000, 0.120, -0.060],   # right_foot (toe)
    [0.000, 0.000, 0.140],    # neck
    [-0.050, 0.000, 0.100],   # left_collar
    [0.050, 0.000, 0.100],    # right_collar
    [0.000, 0.000, 0.120],    # head
    [-0.120, 0.000, 0.020],   # left_shoulder
    [0.120, 0.000, 0.020],    # right_shoulder
    [-0.260, 0.000, 0.000],   # left_elbow
    [0.260, 0.000, 0.000],    # right_elbow
    [-0.250, 0.000, 0.000],   # left_wrist
    [0.250, 0.000, 0.000],    # right_wrist
])

# pelvis height of the rest pose standing on z = 0 ground
REST_PELVIS_HEIGHT = 0.066 + 0.383 + 0.400 + 0.060


@dataclass(frozen=True)
class Skeleton:
    parents: tuple
    offsets: np.ndarray
    names: tuple

    def __post_init__(self):
        k = len(self.parents)
        if self.offsets.shape != (k, 3):
            raise ValueError("offsets must be (K, 3)")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j, p in enumerate(self.parents[1:], 1):
            if not (0 <= p < j):
                raise ValueError("parents must be topologically ordered (tree)")
            if np.linalg.norm(self.offsets[j]) <= 0:
                raise ValueError(f"bone length of joint {j} must be > 0")

    @property
    def num_joints(self):
        return len(self.parents)

    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets[1:], axis=1)


def default_skeleton() -> Skeleton:
    return Skeleton(_PARENTS, _OFFSETS.copy(), JOINT_NAMES)


def rotvec_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Batched Rodrigues formula, (..., 3) -> (..., 3, 3), stable near zero."""
    theta2 = (r * r).sum(-1, keepdim=True).unsqueeze(-1)  # (..., 1, 1)
    theta = torch.sqrt(theta2.clamp_min(1e-300))
    small = theta2 < 1e-16
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2.clamp_min(1e-300))
    zeros = torch.zeros_like(r[..., 0])
    k = torch.stack([
        zeros, -r[..., 2], r[..., 1],
        r[..., 2], zeros, -r[..., 0],
        -r[..., 1], r[..., 0], zeros,
    ], dim=-1).reshape(r.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand(k.shape)
    return eye + a * k + b * (k @ k)


def forward_kinematics(skeleton: Skeleton, poses: torch.Tensor) -> torch.Tensor:
    """Joint world positions for pose vectors.

    poses: (..., 69) -> joints (..., K, 3). Root translation and orientation
    place the pelvis; each joint's axis-angle rotates its children's offsets.
    """
    if poses.shape[-1] != POSE_DIM:
        raise ValueError(f"pose vectors must have {POSE_DIM} entries")
    k = skeleton.num_joints
    tau = poses[..., 0:3]
    rots = poses[..., 3:].reshape(poses.shape[:-1] + (k, 3))
    local = rotvec_to_matrix(rots)  # (..., K, 3, 3)
    offsets = torch.as_tensor(skeleton.offsets, dtype=poses.dtype, device=poses.device)

    world_rot = [None] * k
    pos = [None] * k
    world_rot[0] = local[..., 0, :, :]
    pos[0] = tau
    for j in range(1, k):
        p = skeleton.parents[j]
        pos[j] = pos[p] + torch.einsum("...ij,j->...i", world_rot[p], offsets[j])
        world_rot[j] = world_rot[p] @ local[..., j, :, :]
    return torch.stack(pos, dim=-2)


def fk_numpy(skeleton: Skeleton, poses: np.ndarray) -> np.ndarray:
    """Forward kinematics on numpy pose arrays (float64, no gradients)."""
    with torch.no_grad():
        t = torch.as_tensor(np.asarray(poses, dtype=np.float64))
        return forward_kinematics(skeleton, t).numpy()


def marker_positions(skeleton: Skeleton, joints) -> np.ndarray:
    """Body-surface proxy markers: 22 joints plus the 21 bone midpoints."""
    j = np.asarray(joints, dtype=np.float64)
    parents = np.asarray(skeleton.parents[1:])
    mid = 0.5 * (j[..., 1:, :] + j[..., parents, :])
    return np.concatenate([j, mid], axis=-2)
