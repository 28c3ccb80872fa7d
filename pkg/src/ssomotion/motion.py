"""Pose and motion-clip containers, file formats and window preprocessing."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .skeleton import PELVIS, POSE_DIM, Skeleton, fk_numpy
from .triplane import body_frame_from_joints, wrap_angle

log = logging.getLogger(__name__)

DEFAULT_FPS = 30.0
DEFAULT_CLIP_LEN = 30
DEFAULT_STRIDE = 5

_MOT_MAGIC = b"MOT1"


@dataclass
class Pose:
    """One body pose: root translation, global orientation, 21 joint rotations."""

    tau: np.ndarray           # (3,)
    global_orient: np.ndarray  # (3,) axis-angle
    joint_rots: np.ndarray     # (63,) axis-angle triples

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=np.float64)
        self.global_orient = np.asarray(self.global_orient, dtype=np.float64)
        self.joint_rots = np.asarray(self.joint_rots, dtype=np.float64).reshape(63)
        vec = self.to_vector()
        if not np.all(np.isfinite(vec)):
            raise ValueError("pose must be finite")
        angles = np.linalg.norm(np.concatenate(
            [self.global_orient[None], self.joint_rots.reshape(21, 3)]), axis=1)
        if np.any(angles >= 2.0 * math.pi):
            raise ValueError("axis-angle magnitude must be < 2*pi (canonicalize first)")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.tau, self.global_orient, self.joint_rots])

    @staticmethod
    def from_vector(v) -> "Pose":
        v = np.asarray(v, dtype=np.float64).reshape(POSE_DIM)
        return Pose(v[0:3], v[3:6], v[6:])


def canonicalize_rotvec(r: np.ndarray) -> np.ndarray:
    """Wrap an axis-angle vector to magnitude <= pi (same rotation)."""
    return Rotation.from_rotvec(np.asarray(r, dtype=np.float64)).as_rotvec()


@dataclass
class MotionClip:
    """Fixed-fps pose sequence stored as an (S, 69) float64 array."""

    fps: float
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != POSE_DIM:
            raise ValueError(f"clip data must be (S, {POSE_DIM})")
        if self.data.shape[0] < 1:
            raise ValueError("clip must have at least one frame")
        if not (self.fps > 0):
            raise ValueError("fps must be > 0")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("clip must be finite")

    def __len__(self):
        return self.data.shape[0]

    @property
    def translations(self) -> np.ndarray:
        return self.data[:, 0:3]

    def pose(self, i: int) -> Pose:
        return Pose.from_vector(self.data[i])

    def joints(self, skeleton: Skeleton) -> np.ndarray:
        return fk_numpy(skeleton, self.data)


def save_clips_jsonl(clips, path) -> None:
    """One clip per line: {"fps": ..., "frames": [[69 floats], ...]}."""
    with open(path, "w", encoding="utf-8") as f:
        for clip in clips:
            f.write(json.dumps(
                {"fps": clip.fps, "frames": clip.data.tolist()},
                separators=(",", ":")) + "\n")


def load_clips_jsonl(path) -> list:
    clips = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                clips.append(MotionClip(float(obj["fps"]), np.array(obj["frames"])))
            except (KeyError, ValueError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: bad motion clip: {e}") from None
    return clips


def save_clips_binary(clips, path) -> None:
    """Binary variant: magic, clip count, then per clip fps + frame block."""
    clips = list(clips)
    with open(path, "wb") as f:
        f.write(_MOT_MAGIC)
        f.write(struct.pack("<I", len(clips)))
        for clip in clips:
            f.write(struct.pack("<dI", clip.fps, len(clip)))
            f.write(clip.data.astype("<f8").tobytes())


def load_clips_binary(path) -> list:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MOT_MAGIC:
        raise ValueError(f"{path}: bad magic at byte offset 0")
    (count,) = struct.unpack_from("<I", blob, 4)
    off = 8
    clips = []
    for _ in range(count):
        if off + 12 > len(blob):
            raise ValueError(f"{path}: truncated clip header at byte offset {off}")
        fps, frames = struct.unpack_from("<dI", blob, off)
        off += 12
        n = frames * POSE_DIM * 8
        if off + n > len(blob):
            raise ValueError(f"{path}: truncated frames at byte offset {off}")
        data = np.frombuffer(blob[off:off + n], dtype="<f8").reshape(frames, POSE_DIM)
        off += n
        clips.append(MotionClip(fps, data.copy()))
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes at byte offset {off}")
    return clips


def _z_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidXY:
    """Yaw-plus-horizontal-translation transform acting on poses."""

    yaw: float
    txy: tuple  # (tx, ty)

    def matrix(self) -> np.ndarray:
        return _z_rotation(self.yaw)

    def apply_points(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p @ self.matrix().T + np.array([self.txy[0], self.txy[1], 0.0])

    def inverse(self) -> "RigidXY":
        R = _z_rotation(-self.yaw)
        t = -(R @ np.array([self.txy[0], self.txy[1], 0.0]))
        return RigidXY(wrap_angle(-self.yaw), (t[0], t[1]))


def transform_pose_array(data: np.ndarray, xform: RigidXY) -> np.ndarray:
    """Apply a rigid xy transform to pose vectors (S, 69)."""
    data = np.asarray(data, dtype=np.float64)
    out = data.copy()
    out[:, 0:3] = xform.apply_points(data[:, 0:3])
    rz = Rotation.from_matrix(xform.matrix())
    out[:, 3:6] = (rz * Rotation.from_rotvec(data[:, 3:6])).as_rotvec()
    return out


def canonicalize_window(data: np.ndarray, skeleton: Skeleton):
    """Rigidly move a window so frame 1 has pelvis at xy = 0 facing +y.

    Returns (canonical data, world_from_canonical) where the transform maps
    canonical-frame points back into the original world frame. Heights (z) are
    preserved.
    """
    joints0 = fk_numpy(skeleton, np.asarray(data, dtype=np.float64)[0])
    frame = body_frame_from_joints(joints0)
    px, py = frame.translation[0], frame.translation[1]
    world_from_canonical = RigidXY(frame.yaw, (px, py))
    canonical = transform_pose_array(data, world_from_canonical.inverse())
    return canonical, world_from_canonical


def resample_motion(data: np.ndarray, fps_in: float, fps_out: float) -> np.ndarray:
    """Resample pose frames: linear on translations, slerp on rotations."""
    data = np.asarray(data, dtype=np.float64)
    if fps_in == fps_out:
        return data.copy()
    duration = (len(data) - 1) / fps_in
    t_in = np.arange(len(data)) / fps_in
    t_out = np.arange(math.floor(duration * fps_out) + 1) / fps_out
    out = np.zeros((len(t_out), POSE_DIM))
    for d in range(3):
        out[:, d] = np.interp(t_out, t_in, data[:, d])
    for j in range(22):
        sl = slice(3 + 3 * j, 6 + 3 * j)
        if len(data) == 1:
            out[:, sl] = data[0, sl]
            continue
        rots = Rotation.from_rotvec(data[:, sl])
        out[:, sl] = Slerp(t_in, rots)(np.clip(t_out, t_in[0], t_in[-1])).as_rotvec()
    return out


def preprocess_clips(raw_motions, skeleton: Skeleton, stride: int = DEFAULT_STRIDE,
                     clip_len: int = DEFAULT_CLIP_LEN, fps: float = DEFAULT_FPS) -> list:
    """Slice raw motions into canonical fixed-length windows.

    Windows start every `stride` frames; each is aligned so its first frame
    has the pelvis at xy = 0 facing +y. Motions shorter than one window after
    resampling are skipped with a warning.
    """
    out = []
    for i, motion in enumerate(raw_motions):
        if isinstance(motion, MotionClip):
            data, fps_in = motion.data, motion.fps
        else:
            data, fps_in = np.asarray(motion, dtype=np.float64), fps
        data = resample_motion(data, fps_in, fps)
        if len(data) < clip_len:
            log.warning("motion %d too short after resampling (%d < %d frames); skipped",
                        i, len(data), clip_len)
            continue
        for start in range(0, len(data) - clip_len + 1, stride):
            window = data[start:start + clip_len]
            canonical, _ = canonicalize_window(window, skeleton)
            out.append(MotionClip(fps, canonical))
    return out
