"""Body-centered sensor grids and bi-directional tri-plane decomposition.

A lattice of sensors is placed around the pelvis, oriented by the horizontal
facing of the body, and sampled against the sparse SSO. The resulting local
occupancy volume is rendered along +-x, +-y and -z into first-hit maps of
color, depth and semantic label. The upward (+z, ceiling) map is dropped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .store import SparseSSO

PELVIS, LEFT_HIP, RIGHT_HIP = 0, 1, 2

MAP_NAMES = ("+x", "-x", "+y", "-y", "-z")

# fraction of the grid's z extent that sits below the pelvis
Z_BELOW_FRACTION = 1.0 / 3.0


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class BodyFrame:
    """Pelvis position and horizontal facing.

    yaw is the z-rotation mapping the body-local frame to world; yaw = 0 means
    the body faces world +y with its right side along +x.
    """

    translation: tuple
    yaw: float

    def __post_init__(self):
        if not all(np.isfinite(self.translation)) or not np.isfinite(self.yaw):
            raise ValueError("body frame must be finite")
        if not (-math.pi < self.yaw <= math.pi):
            raise ValueError("yaw must lie in (-pi, pi]")

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class SensorGridConfig:
    counts: tuple = (101, 101, 81)
    extents: tuple = (4.0, 4.0, 3.2)

    def __post_init__(self):
        if len(self.counts) != 3 or len(self.extents) != 3:
            raise ValueError("counts and extents must have 3 entries")
        if any(int(c) < 2 for c in self.counts):
            raise ValueError("all sensor counts must be >= 2")
        if any(not (e > 0) for e in self.extents):
            raise ValueError("all extents must be > 0")

    def spacing(self) -> tuple:
        return tuple(e / (c - 1) for e, c in zip(self.extents, self.counts))

    def center_index(self) -> tuple:
        return tuple(int(c) // 2 for c in self.counts)

    def local_axes(self):
        """1-D local sensor coordinates per axis (x, y centered; z offset)."""
        xs = np.linspace(-self.extents[0] / 2.0, self.extents[0] / 2.0, self.counts[0])
        ys = np.linspace(-self.extents[1] / 2.0, self.extents[1] / 2.0, self.counts[1])
        z_lo = -self.extents[2] * Z_BELOW_FRACTION
        zs = np.linspace(z_lo, z_lo + self.extents[2], self.counts[2])
        return xs, ys, zs


@dataclass
class LocalSSO:
    """Dense body-centered occupancy sampled from the sparse store."""

    occupied: np.ndarray  # (nx, ny, nz) bool
    rgb: np.ndarray       # (nx, ny, nz, 3)
    label: np.ndarray     # (nx, ny, nz) int32

    def __post_init__(self):
        if self.occupied.shape != self.label.shape or self.rgb.shape != self.occupied.shape + (3,):
            raise ValueError("local SSO array shapes disagree")


@dataclass
class PlaneMap:
    rgb: np.ndarray    # (d1, d2, 3)
    depth: np.ndarray  # (d1, d2)
    label: np.ndarray  # (d1, d2) int32
    far_depth: float


class TriPlaneMaps(dict):
    """Five first-hit maps keyed by MAP_NAMES; the +z map never exists."""

    def __init__(self, maps):
        if set(maps) != set(MAP_NAMES):
            raise ValueError(f"tri-plane maps must have exactly keys {MAP_NAMES}")
        super().__init__(maps)


def body_frame_from_joints(joints: np.ndarray) -> BodyFrame:
    """Derive pelvis translation and horizontal yaw from skeleton joints.

    Forward is up x (right_hip - left_hip), projected to the ground plane.
    """
    joints = np.asarray(joints, dtype=np.float64)
    if joints.ndim != 2 or joints.shape[1] != 3 or joints.shape[0] < 3:
        raise ValueError("need at least pelvis and both hip joints (K x 3)")
    if not np.all(np.isfinite(joints)):
        raise ValueError("joints must be finite")
    hip = joints[RIGHT_HIP] - joints[LEFT_HIP]
    if np.linalg.norm(hip) < 1e-9:
        raise ValueError("hip joints are coincident; facing is undefined")
    forward = np.array([-hip[1], hip[0]])  # z x hip, ground-plane components
    if np.linalg.norm(forward) < 1e-9:
        raise ValueError("hip axis is vertical; facing is undefined")
    yaw = wrap_angle(math.atan2(forward[1], forward[0]) - math.pi / 2.0)
    return BodyFrame(tuple(joints[PELVIS]), yaw)


def place_sensors(frame: BodyFrame, cfg: SensorGridConfig) -> np.ndarray:
    """World positions of the body-centered sensor lattice, (nx, ny, nz, 3)."""
    xs, ys, zs = cfg.local_axes()
    local = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
    world = local @ frame.rotation().T + np.asarray(frame.translation)
    return world


def sample_local(sso: SparseSSO, sensors: np.ndarray) -> LocalSSO:
    """Grid-sample the sparse SSO at every sensor position."""
    sensors = np.asarray(sensors, dtype=np.float64)
    if sensors.ndim != 4 or sensors.shape[3] != 3:
        raise ValueError("sensors must be (nx, ny, nz, 3)")
    if not np.all(np.isfinite(sensors)):
        raise ValueError("sensor positions must be finite")
    shape = sensors.shape[:3]
    occ, rgb, lab = sso.sample_many(sensors.reshape(-1, 3))
    return LocalSSO(
        occupied=occ.reshape(shape),
        rgb=rgb.reshape(shape + (3,)),
        label=lab.astype(np.int32).reshape(shape),
    )


def _march(occ, rgb, lab, axis, start, direction, spacing, far):
    """First-hit scan from `start` along `axis` in +-1 `direction`.

    Returns per-pixel (rgb, depth, label) over the two non-march axes. The
    march includes the start layer (depth 0); depth is clamped to `far`.
    """
    if direction > 0:
        sub = [slice(None)] * 3
        sub[axis] = slice(start, None)
    else:
        sub = [slice(None)] * 3
        sub[axis] = slice(start, None, -1)
    o = occ[tuple(sub)]
    r = rgb[tuple(sub)]
    l = lab[tuple(sub)]
    steps = np.argmax(o, axis=axis)
    hit = np.any(o, axis=axis)
    depth = np.where(hit, np.minimum(steps * spacing, far), far)
    take = np.expand_dims(steps, axis)
    hit_rgb = np.take_along_axis(r, np.expand_dims(take, -1), axis=axis).squeeze(axis)
    hit_lab = np.take_along_axis(l, take, axis=axis).squeeze(axis)
    out_rgb = np.where(hit[..., None], hit_rgb, 0.0)
    out_lab = np.where(hit, hit_lab, 0).astype(np.int32)
    return out_rgb, depth.astype(np.float64), out_lab


def decompose_triplane(local: LocalSSO, cfg: SensorGridConfig) -> TriPlaneMaps:
    """Render the local occupancy into the five first-hit maps.

    Rays start at the central sensor layer through the pelvis and march
    outward; -z marches downward only (the ceiling map is dropped). Unhit
    rays carry depth = far_depth (half extent of the march axis), label 0.
    """
    if local.occupied.shape != tuple(cfg.counts):
        raise ValueError(
            f"local grid shape {local.occupied.shape} does not match config {cfg.counts}")
    cx, cy, cz = cfg.center_index()
    dx, dy, dz = cfg.spacing()
    far = tuple(e / 2.0 for e in cfg.extents)
    occ, rgb, lab = local.occupied, local.rgb, local.label

    maps = {}
    for name, axis, start, direction, spacing, f in (
        ("+x", 0, cx, +1, dx, far[0]),
        ("-x", 0, cx, -1, dx, far[0]),
        ("+y", 1, cy, +1, dy, far[1]),
        ("-y", 1, cy, -1, dy, far[1]),
        ("-z", 2, cz, -1, dz, far[2]),
    ):
        m_rgb, m_depth, m_lab = _march(occ, rgb, lab, axis, start, direction, spacing, f)
        maps[name] = PlaneMap(rgb=m_rgb, depth=m_depth, label=m_lab, far_depth=f)
    return TriPlaneMaps(maps)


def activate_depth(depth_map: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Gaussian proximity activation: peaks at depth 0, decays with distance."""
    if not (sigma > 0):
        raise ValueError("sigma must be > 0")
    d = np.asarray(depth_map, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("depths must be >= 0")
    return np.exp(-(d ** 2) / (2.0 * sigma ** 2)) / (sigma * math.sqrt(2.0 * math.pi))


def normalize_color(rgb_map: np.ndarray, scale_255: bool = False) -> np.ndarray:
    """Linear [0,1] normalization; idempotent when already in [0,1]."""
    rgb = np.asarray(rgb_map, dtype=np.float64)
    hi = 255.0 if scale_255 else 1.0
    if rgb.size and (rgb.min() < 0.0 or rgb.max() > hi):
        raise ValueError(f"color values outside declared range [0, {hi}]")
    return rgb / hi


def perceive(sso: SparseSSO, frame: BodyFrame, cfg: SensorGridConfig) -> TriPlaneMaps:
    """Full body-centered perception: place sensors, sample, decompose."""
    return decompose_triplane(sample_local(sso, place_sensors(frame, cfg)), cfg)
