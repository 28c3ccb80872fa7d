"""Base diffusion training with masked reconstruction and velocity losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .denoiser import Condition, DenoiserNet
from .diffusion import NoiseSchedule, q_sample
from .skeleton import Skeleton, forward_kinematics

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    h_max: int = 5
    seed: int = 0
    min_history: int = 0  # smallest random known-joint prefix per sample
    log_every: int = 200


def loss_terms(x_hat0: torch.Tensor, x0: torch.Tensor, frame_mask: torch.Tensor,
               skeleton: Skeleton, fps: float) -> dict:
    """Masked squared-error terms over rotations, translation and joint speed.

    frame_mask is (B, S); a fully masked-out batch yields exactly zero for all
    three terms. Velocity compares per-joint speed magnitudes (scaled by fps)
    and is masked from the second frame on.
    """
    m = frame_mask.to(x_hat0.dtype)
    rot_err = ((x_hat0[..., 3:] - x0[..., 3:]) ** 2).sum(-1)
    trans_err = ((x_hat0[..., :3] - x0[..., :3]) ** 2).sum(-1)
    rot_den = m.sum() * (x0.shape[-1] - 3)
    trans_den = m.sum() * 3
    l_rot = (m * rot_err).sum() / torch.clamp(rot_den, min=1.0)
    l_trans = (m * trans_err).sum() / torch.clamp(trans_den, min=1.0)

    j_hat = forward_kinematics(skeleton, x_hat0)
    j_ref = forward_kinematics(skeleton, x0)
    v_hat = torch.linalg.norm(j_hat[..., 1:, :, :] - j_hat[..., :-1, :, :], dim=-1) * fps
    v_ref = torch.linalg.norm(j_ref[..., 1:, :, :] - j_ref[..., :-1, :, :], dim=-1) * fps
    m1 = m[..., 1:]
    vel_err = ((v_hat - v_ref) ** 2).sum(-1)
    vel_den = m1.sum() * v_hat.shape[-1]
    l_vel = (m1 * vel_err).sum() / torch.clamp(vel_den, min=1.0)
    return {"rot": l_rot, "trans": l_trans, "vel": l_vel,
            "total": l_rot + l_trans + l_vel}


@dataclass
class MotionDataset:
    """Clips stacked into tensors, with FK joints precomputed for guidance."""

    x0: torch.Tensor       # (N, S, 69)
    actions: torch.Tensor  # (N,)
    joints: torch.Tensor   # (N, S, K, 3)
    fps: float

    @staticmethod
    def from_clips(clips, actions, skeleton: Skeleton,
                   dtype=torch.float64) -> "MotionDataset":
        if len(clips) == 0:
            raise ValueError("dataset must not be empty")
        lengths = {len(c) for c in clips}
        fpses = {c.fps for c in clips}
        if len(lengths) != 1 or len(fpses) != 1:
            raise ValueError("all clips must share one length and fps")
        x0 = torch.as_tensor(np.stack([c.data for c in clips]), dtype=dtype)
        with torch.no_grad():
            joints = forward_kinematics(skeleton, x0)
        return MotionDataset(x0, torch.as_tensor(list(actions), dtype=torch.long),
                             joints, clips[0].fps)

    def __len__(self):
        return self.x0.shape[0]


def sample_batch(data: MotionDataset, sched: NoiseSchedule, cfg: TrainConfig,
                 gen: torch.Generator):
    """Draw (x0, t, noise, cond, frame_mask) for one training step."""
    n, s = data.x0.shape[0], data.x0.shape[1]
    idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
    x0 = data.x0[idx]
    t = torch.randint(1, sched.num_steps + 1, (cfg.batch_size,), generator=gen)
    noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    hist = torch.randint(cfg.min_history, cfg.h_max + 1, (cfg.batch_size,),
                         generator=gen)
    mask = torch.arange(s).unsqueeze(0) < hist.unsqueeze(1)
    cond = Condition(data.actions[idx], data.joints[idx], mask)
    frame_mask = torch.ones(cfg.batch_size, s, dtype=torch.bool)
    return x0, t, noise, cond, frame_mask


def train_base(net: DenoiserNet, data: MotionDataset, sched: NoiseSchedule,
               cfg: TrainConfig, skeleton: Skeleton):
    """Optimize the denoiser on clean-motion reconstruction; returns the curve."""
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    curve = []
    for step in range(cfg.steps):
        x0, t, noise, cond, frame_mask = sample_batch(data, sched, cfg, gen)
        x_t = q_sample(x0, t.numpy(), noise, sched)
        x_hat0 = net(x_t, t.to(x0.dtype), cond)
        losses = loss_terms(x_hat0, x0, frame_mask, skeleton, data.fps)
        total = losses["total"]
        if not torch.isfinite(total):
            raise TrainingDiverged(step)
        opt.zero_grad()
        total.backward()
        opt.step()
        curve.append(float(total.detach()))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("base step %d: total %.6f (rot %.6f trans %.6f vel %.6f)",
                     step, curve[-1], float(losses["rot"].detach()),
                     float(losses["trans"].detach()), float(losses["vel"].detach()))
    return net, curve
