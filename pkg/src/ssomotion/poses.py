"""Canonical end-pose library for interaction targets and data generation.

All poses face +y in their local frame; place_pose moves them into the world.
"""
from __future__ import annotations

import math

import numpy as np

from .motion import RigidXY, transform_pose_array
from .skeleton import POSE_DIM, REST_PELVIS_HEIGHT

# joint-rotation slice offsets into the 69-vector (joint j -> 6 + 3*(j-1))
_L_HIP, _R_HIP = slice(6, 9), slice(9, 12)
_L_KNEE, _R_KNEE = slice(15, 18), slice(18, 21)
_L_SHOULDER, _R_SHOULDER = slice(51, 54), slice(54, 57)
_L_ELBOW, _R_ELBOW = slice(57, 60), slice(60, 63)

SIT_PELVIS_CLEARANCE = 0.02   # pelvis rests this far above the seat surface
LIE_PELVIS_CLEARANCE = 0.10   # body thickness allowance above the support


def standing_pose(pelvis_z: float = REST_PELVIS_HEIGHT) -> np.ndarray:
    v = np.zeros(POSE_DIM)
    v[2] = pelvis_z
    # arms relaxed: rotate shoulders so the T-pose arms hang down
    v[_L_SHOULDER] = [0.0, -1.3, 0.0]
    v[_R_SHOULDER] = [0.0, 1.3, 0.0]
    return v


def sit_pose(seat_height: float = 0.45) -> np.ndarray:
    """Seated: thighs horizontal forward, shins vertical, pelvis on the seat."""
    v = standing_pose(pelvis_z=seat_height + SIT_PELVIS_CLEARANCE)
    v[_L_HIP] = [math.pi / 2.0, 0.0, 0.0]
    v[_R_HIP] = [math.pi / 2.0, 0.0, 0.0]
    v[_L_KNEE] = [-math.pi / 2.0, 0.0, 0.0]
    v[_R_KNEE] = [-math.pi / 2.0, 0.0, 0.0]
    return v


def lie_pose(support_height: float = 0.5) -> np.ndarray:
    """Supine on a support surface, head toward local -y, face up."""
    v = np.zeros(POSE_DIM)
    v[2] = support_height + LIE_PELVIS_CLEARANCE
    v[3:6] = [math.pi / 2.0, 0.0, 0.0]
    v[_L_SHOULDER] = [0.0, -1.3, 0.0]
    v[_R_SHOULDER] = [0.0, 1.3, 0.0]
    return v


def place_pose(pose: np.ndarray, xy, yaw: float) -> np.ndarray:
    """Rotate a canonical pose by yaw and move its pelvis over (x, y)."""
    placed = transform_pose_array(pose[None], RigidXY(yaw, (xy[0], xy[1])))[0]
    return placed


def end_pose_for(action: str, support_height: float) -> np.ndarray:
    if action == "sit":
        return sit_pose(support_height)
    if action == "lie":
        return lie_pose(support_height)
    raise KeyError(f"no end pose for action {action!r}")
