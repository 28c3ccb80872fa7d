"""Denoising diffusion machinery: schedules, forward noising, reverse steps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .motion import MotionClip


@dataclass
class NoiseSchedule:
    """Per-step alpha_t with the usual derived tables; steps are 1-based."""

    alphas: np.ndarray  # (T,), entry i is alpha_{i+1}

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.alphas.ndim != 1 or len(self.alphas) < 1:
            raise ValueError("need at least one step")
        if np.any(self.alphas <= 0) or np.any(self.alphas > 1):
            raise ValueError("alpha_t must lie in (0, 1]")
        self.betas = 1.0 - self.alphas
        self.alpha_bars = np.cumprod(self.alphas)
        prev = np.concatenate(([1.0], self.alpha_bars[:-1]))
        denom = 1.0 - self.alpha_bars
        # beta_tilde_1 is exactly 0 because alpha_bar_0 = 1
        self.beta_tildes = np.where(denom > 0, (1.0 - prev) / np.where(denom > 0, denom, 1.0) * self.betas, 0.0)

    @property
    def num_steps(self) -> int:
        return len(self.alphas)

    def _check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.num_steps):
            raise ValueError(f"t must lie in [1, {self.num_steps}]")

    def alpha_bar(self, t):
        """alpha_bar_t with alpha_bar_0 = 1; accepts scalars or arrays."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.num_steps):
            raise ValueError(f"t must lie in [0, {self.num_steps}]")
        table = np.concatenate(([1.0], self.alpha_bars))
        return table[t]


def linear_schedule(num_steps: int, beta_start: float = 1e-4,
                    beta_end: float = 2e-2, reference_steps: int = 1000) -> NoiseSchedule:
    """Linear beta schedule, rescaled so shorter schedules still end near
    alpha_bar ~= 0 (otherwise sampling from pure noise starts off-manifold).

    At num_steps == reference_steps this is exactly linspace(start, end).
    """
    scale = reference_steps / num_steps
    betas = np.linspace(scale * beta_start, scale * beta_end, num_steps)
    betas = np.clip(betas, 0.0, 0.999)
    return NoiseSchedule(1.0 - betas)


def _gather(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Pick per-sample schedule scalars and shape them to broadcast over x."""
    t = np.asarray(t)
    v = torch.as_tensor(values[t - 1] if t.ndim else values[int(t) - 1],
                        dtype=like.dtype, device=like.device)
    if t.ndim:
        v = v.reshape((-1,) + (1,) * (like.dim() - 1))
    return v


def q_sample(x0: torch.Tensor, t, noise: torch.Tensor,
             sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) noise."""
    sched._check_t(t)
    if noise.shape != x0.shape:
        raise ValueError("noise must match x0's shape")
    ab = _gather(sched.alpha_bars, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def posterior_step(x_hat0: torch.Tensor, x_t: torch.Tensor, t,
                   sched: NoiseSchedule, noise: torch.Tensor = None) -> torch.Tensor:
    """One reverse step from the predicted clean sequence.

    mean = sqrt(ab_{t-1}) beta_t / (1 - ab_t) * x_hat0
         + sqrt(a_t) (1 - ab_{t-1}) / (1 - ab_t) * x_t,
    plus sqrt(beta_tilde_t) noise. At t = 1 the step is deterministic.
    """
    sched._check_t(t)
    t_arr = np.asarray(t)
    ab_t = _gather(sched.alpha_bars, t, x_t)
    ab_prev = torch.as_tensor(sched.alpha_bar(t_arr - 1), dtype=x_t.dtype)
    if t_arr.ndim:
        ab_prev = ab_prev.reshape(ab_t.shape)
    beta_t = _gather(sched.betas, t, x_t)
    alpha_t = _gather(sched.alphas, t, x_t)
    bt = _gather(sched.beta_tildes, t, x_t)
    denom = 1.0 - ab_t
    mean = (torch.sqrt(ab_prev) * beta_t / denom) * x_hat0 \
        + (torch.sqrt(alpha_t) * (1.0 - ab_prev) / denom) * x_t
    if noise is None:
        return mean
    if noise.shape != x_t.shape:
        raise ValueError("noise must match x_t's shape")
    return mean + torch.sqrt(bt) * noise


@torch.no_grad()
def sample(net, cond, sched: NoiseSchedule, generator: torch.Generator,
           fps: float = 30.0, control_hook=None) -> MotionClip:
    """Full reverse loop from pure noise to a motion clip.

    control_hook, when given, maps (x_t, t) to per-block residuals that are
    injected into the denoiser.
    """
    from .denoiser import predict_x0  # local import to avoid a cycle

    s = cond.joints.shape[-3]
    dtype = next(net.parameters()).dtype
    x = torch.randn((s, net.cfg.pose_dim), generator=generator, dtype=dtype)
    for t in range(sched.num_steps, 0, -1):
        residuals = control_hook(x, t) if control_hook is not None else None
        x_hat0 = predict_x0(net, x, t, cond, residuals=residuals)
        noise = torch.randn(x.shape, generator=generator, dtype=dtype) if t > 1 else None
        x = posterior_step(x_hat0, x, t, sched, noise)
    return MotionClip(fps, x.detach().cpu().numpy())
