"""Goal-directed motion control: direction hints, scene correlation and the
zero-initialized control branch that injects residuals into the denoiser."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .denoiser import Block, Condition, DenoiserConfig, DenoiserNet
from .diffusion import NoiseSchedule, q_sample
from .encoding import ScenePipeline
from .motion import canonicalize_window
from .skeleton import PELVIS, Skeleton, fk_numpy
from .store import SparseSSO
from .training import TrainConfig, TrainingDiverged, loss_terms
from .triplane import SensorGridConfig, TriPlaneMaps, body_frame_from_joints, perceive

log = logging.getLogger(__name__)

CLIP_EPS = 1e-6


@dataclass(frozen=True)
class DirectionalHint:
    """Per-joint displacement toward the goal; locomotion rows are identical."""

    d: np.ndarray  # (K, 3)
    mode: str      # "locomotion" | "interaction"

    def __post_init__(self):
        object.__setattr__(self, "d", np.asarray(self.d, dtype=np.float64))
        if self.d.ndim != 2 or self.d.shape[1] != 3:
            raise ValueError("hint must be (K, 3)")
        if not np.all(np.isfinite(self.d)):
            raise ValueError("hint must be finite")
        if self.mode == "locomotion":
            if not np.all(self.d == self.d[0]):
                raise ValueError("locomotion hint rows must be identical")
        elif self.mode != "interaction":
            raise ValueError(f"unknown hint mode {self.mode!r}")


def locomotion_direction(goal, joints_frame1: np.ndarray) -> DirectionalHint:
    """Pelvis-to-goal direction replicated for every joint."""
    goal = np.asarray(goal, dtype=np.float64)
    joints = np.asarray(joints_frame1, dtype=np.float64)
    d = goal - joints[PELVIS]
    return DirectionalHint(np.tile(d, (joints.shape[0], 1)), "locomotion")


def interaction_direction(target_joints: np.ndarray,
                          joints_frame1: np.ndarray) -> DirectionalHint:
    """Per-joint displacement from the current pose to the target pose."""
    target = np.asarray(target_joints, dtype=np.float64)
    joints = np.asarray(joints_frame1, dtype=np.float64)
    if target.shape != joints.shape:
        raise ValueError("target and current joints must have the same shape")
    return DirectionalHint(target - joints, "interaction")


def clip_direction(d: np.ndarray, eps: float = CLIP_EPS) -> np.ndarray:
    """Per-row soft norm clip: rows with norm <= 1 pass through unchanged."""
    if not (eps > 0):
        raise ValueError("eps must be > 0")
    d = np.asarray(d, dtype=np.float64)
    norms = np.linalg.norm(d, axis=-1, keepdims=True)
    factor = (np.minimum(norms, 1.0) + eps) / (norms + eps)
    return factor * d


def clip_hint(hint: DirectionalHint, eps: float = CLIP_EPS) -> DirectionalHint:
    return DirectionalHint(clip_direction(hint.d, eps), hint.mode)


class CrossAttention(nn.Module):
    """Multi-head cross-attention of frame features over a token block.

    Tokens are bridged up to the attention latent before the key/value
    projections; scores are scaled by the per-head key width.
    """

    def __init__(self, query_dim: int, token_dim: int, latent: int,
                 heads: int, dtype=torch.float64):
        super().__init__()
        if latent % heads != 0:
            raise ValueError("attention latent width must divide by head count")
        self.heads = heads
        self.head_dim = latent // heads
        self.bridge = nn.Linear(token_dim, latent, dtype=dtype)
        self.wq = nn.Linear(query_dim, latent, dtype=dtype)
        self.wk = nn.Linear(latent, latent, dtype=dtype)
        self.wv = nn.Linear(latent, latent, dtype=dtype)
        self.out = nn.Linear(latent, query_dim, dtype=dtype)

    def weights_and_values(self, queries: torch.Tensor, tokens: torch.Tensor):
        squeeze = queries.dim() == 2
        if squeeze:
            queries, tokens = queries.unsqueeze(0), tokens.unsqueeze(0)
        b, s, _ = queries.shape
        l = tokens.shape[1]
        kv = self.bridge(tokens)

        def split(x, n):
            return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.wq(queries), s)
        k = split(self.wk(kv), l)
        v = split(self.wv(kv), l)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)  # (b, heads, s, l)
        return attn, v, squeeze

    def forward(self, queries: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        attn, v, squeeze = self.weights_and_values(queries, tokens)
        b, _, s, _ = attn.shape
        mixed = (attn @ v).transpose(1, 2).reshape(b, s, self.heads * self.head_dim)
        out = self.out(mixed)
        return out.squeeze(0) if squeeze else out


class DirectionEncoder(nn.Module):
    """Flattened clipped hint (K*3) -> a block of direction tokens."""

    def __init__(self, num_joints: int = 22, tokens=(8, 64), hidden: int = 256,
                 dtype=torch.float64):
        super().__init__()
        self.tokens = tokens
        self.net = nn.Sequential(
            nn.Linear(num_joints * 3, hidden, dtype=dtype),
            nn.GELU(),
            nn.Linear(hidden, tokens[0] * tokens[1], dtype=dtype),
        )

    def forward(self, flat_hint: torch.Tensor) -> torch.Tensor:
        out = self.net(flat_hint)
        return out.reshape(flat_hint.shape[:-1] + self.tokens)


class ZeroLinear(nn.Linear):
    """Linear layer whose weight and bias start at exactly zero."""

    def __init__(self, in_features, out_features, dtype=torch.float64):
        super().__init__(in_features, out_features, dtype=dtype)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


class ControlBranch(nn.Module):
    """Mirror of the main blocks; residuals leave through zero-init layers."""

    def __init__(self, main_cfg: DenoiserConfig):
        super().__init__()
        self.cfg = main_cfg
        dt = main_cfg.dtype
        self.blocks = nn.ModuleList(
            [Block(main_cfg.width, main_cfg.heads, dt) for _ in range(main_cfg.blocks)])
        self.inject = nn.ModuleList(
            [ZeroLinear(main_cfg.width, main_cfg.width, dtype=dt)
             for _ in range(main_cfg.blocks)])

    def forward(self, seed_seq: torch.Tensor, f_mot_gs: torch.Tensor) -> list:
        # frame rows receive the correlation feature; the cond token does not
        pad = torch.zeros_like(f_mot_gs[..., :1, :])
        g = seed_seq + torch.cat([pad, f_mot_gs], dim=-2)
        residuals = []
        for blk, inj in zip(self.blocks, self.inject):
            g = blk(g)
            residuals.append(inj(g))
        return residuals


def control_signals(branch: ControlBranch, main_net: DenoiserNet,
                    x_t: torch.Tensor, t, cond: Condition,
                    f_mot_gs: torch.Tensor) -> list:
    """Per-block residuals from the branch seeded with the main input features."""
    if len(branch.blocks) != len(main_net.blocks):
        raise ValueError("control branch block count must match the main net")
    x_t, cond, squeeze = DenoiserNet._batched(x_t, cond)
    seq = main_net.input_sequence(x_t, t, cond)
    gs = f_mot_gs.unsqueeze(0) if f_mot_gs.dim() == 2 else f_mot_gs
    residuals = branch(seq, gs)
    if squeeze:
        residuals = [r.squeeze(0) for r in residuals]
    return residuals


class Controller(nn.Module):
    """Direction encoder, two correlation stages and the control branch."""

    def __init__(self, main_cfg: DenoiserConfig, scene: ScenePipeline,
                 latent: int = None, dir_tokens=(8, 64), heads: int = 4):
        super().__init__()
        dt = main_cfg.dtype
        latent = latent or main_cfg.width
        token_dim = dir_tokens[1]
        self.dir_encoder = DirectionEncoder(main_cfg.num_joints, dir_tokens, dtype=dt)
        self.attn_goal = CrossAttention(main_cfg.width, token_dim, latent, heads, dt)
        self.attn_scene = CrossAttention(
            main_cfg.width, scene.cfg.tokens[1], latent, heads, dt)
        self.branch = ControlBranch(main_cfg)
        self.scene = scene

    def correlate(self, f_mot: torch.Tensor, dir_hint: torch.Tensor,
                  scene_tokens: torch.Tensor) -> torch.Tensor:
        """Goal correlation then scene correlation over the frame features."""
        dir_tokens = self.dir_encoder(dir_hint)
        f_goal = self.attn_goal(f_mot, dir_tokens)
        return self.attn_scene(f_goal, scene_tokens)

    def residuals(self, main_net: DenoiserNet, x_t: torch.Tensor, t,
                  cond: Condition, dir_hint: torch.Tensor,
                  scene_tokens: torch.Tensor) -> list:
        x_b, cond_b, squeeze = DenoiserNet._batched(x_t, cond)
        f_mot = main_net._frame_features(x_b, cond_b)
        hint = dir_hint.unsqueeze(0) if dir_hint.dim() == 1 else dir_hint
        tokens = scene_tokens.unsqueeze(0) if scene_tokens.dim() == 2 else scene_tokens
        f_gs = self.correlate(f_mot, hint, tokens)
        res = control_signals(self.branch, main_net, x_b, t, cond_b, f_gs)
        if squeeze:
            res = [r.squeeze(0) for r in res]
        return res

    def sampling_hook(self, main_net: DenoiserNet, cond: Condition,
                      hint: DirectionalHint, triplanes: TriPlaneMaps):
        """Bind scene and goal for one synthesis window; scene tokens are
        computed once since the window's perception is fixed."""
        dt = main_net.cfg.dtype
        with torch.no_grad():
            tokens = self.scene.tokens(triplanes)
        flat = torch.as_tensor(clip_direction(hint.d).reshape(-1), dtype=dt)

        def hook(x_t, t):
            return self.residuals(main_net, x_t, t, cond, flat, tokens)

        return hook


@dataclass
class ControlItem:
    """One canonical training window paired with its perception and goal."""

    x0: np.ndarray          # (S, 69) canonical window
    action_id: int
    joints: np.ndarray      # (S, K, 3) canonical FK joints
    dir_hint: np.ndarray    # (K, 3), already norm-clipped, canonical frame
    triplanes: TriPlaneMaps


def build_control_items(scene: SparseSSO, motion_world: np.ndarray, action_id: int,
                        goal_world, skeleton: Skeleton, sensor_cfg: SensorGridConfig,
                        target_joints_world: np.ndarray = None, stride: int = 5,
                        clip_len: int = 30) -> list:
    """Window a world-frame motion into control training items.

    Each window is canonicalized; the scene is perceived from the window's
    first frame; the goal (or target pose) is mapped into the window frame and
    turned into a clipped directional hint.
    """
    motion_world = np.asarray(motion_world, dtype=np.float64)
    items = []
    for start in range(0, len(motion_world) - clip_len + 1, stride):
        window = motion_world[start:start + clip_len]
        canonical, world_from_canonical = canonicalize_window(window, skeleton)
        w2c = world_from_canonical.inverse()
        joints = fk_numpy(skeleton, canonical)
        frame_world = body_frame_from_joints(fk_numpy(skeleton, window[0]))
        triplanes = perceive(scene, frame_world, sensor_cfg)
        if target_joints_world is not None:
            target_c = w2c.apply_points(target_joints_world)
            hint = interaction_direction(target_c, joints[0])
        else:
            goal_c = w2c.apply_points(np.asarray(goal_world, dtype=np.float64))
            hint = locomotion_direction(goal_c, joints[0])
        items.append(ControlItem(canonical, action_id, joints,
                                 clip_direction(hint.d), triplanes))
    return items


def train_control(main_net: DenoiserNet, controller: Controller, items: list,
                  sched: NoiseSchedule, cfg: TrainConfig, skeleton: Skeleton,
                  fps: float = 30.0, freeze_base: bool = False):
    """Joint (or base-frozen) optimization of the control pipeline."""
    if not items:
        raise ValueError("control dataset must not be empty")
    dt = main_net.cfg.dtype
    x0_all = torch.as_tensor(np.stack([it.x0 for it in items]), dtype=dt)
    joints_all = torch.as_tensor(np.stack([it.joints for it in items]), dtype=dt)
    hints_all = torch.as_tensor(
        np.stack([it.dir_hint.reshape(-1) for it in items]), dtype=dt)
    actions_all = torch.as_tensor([it.action_id for it in items], dtype=torch.long)

    base_state = [p.detach().clone() for p in main_net.parameters()]
    if freeze_base:
        for p in main_net.parameters():
            p.requires_grad_(False)
        params = list(controller.parameters())
    else:
        params = list(controller.parameters()) + list(main_net.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    n, s = x0_all.shape[0], x0_all.shape[1]
    min_hist = max(cfg.min_history, 1)  # synthesis always has current pose
    curve = []
    try:
        for step in range(cfg.steps):
            idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
            x0 = x0_all[idx]
            t = torch.randint(1, sched.num_steps + 1, (cfg.batch_size,), generator=gen)
            noise = torch.randn(x0.shape, generator=gen, dtype=dt)
            hist = torch.randint(min_hist, cfg.h_max + 1, (cfg.batch_size,), generator=gen)
            mask = torch.arange(s).unsqueeze(0) < hist.unsqueeze(1)
            cond = Condition(actions_all[idx], joints_all[idx], mask)
            x_t = q_sample(x0, t.numpy(), noise, sched)
            scene_tokens = torch.stack(
                [controller.scene.tokens(items[int(i)].triplanes) for i in idx])
            residuals = controller.residuals(
                main_net, x_t, t.to(dt), cond, hints_all[idx], scene_tokens)
            x_hat0 = main_net(x_t, t.to(dt), cond, residuals=residuals)
            losses = loss_terms(x_hat0, x0, torch.ones(cfg.batch_size, s, dtype=torch.bool),
                                skeleton, fps)
            total = losses["total"]
            if not torch.isfinite(total):
                raise TrainingDiverged(step)
            opt.zero_grad()
            total.backward()
            opt.step()
            curve.append(float(total.detach()))
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("control step %d: total %.6f", step, curve[-1])
    finally:
        if freeze_base:
            for p in main_net.parameters():
                p.requires_grad_(True)
    if freeze_base:
        for p, ref in zip(main_net.parameters(), base_state):
            if not torch.equal(p.detach(), ref):
                raise AssertionError("frozen base parameters changed during control training")
    return controller, curve
