"""Transformer denoiser that predicts the clean motion from a noised one."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn


@dataclass
class DenoiserConfig:
    width: int = 512
    blocks: int = 4
    heads: int = 4
    pose_dim: int = 69
    num_joints: int = 22
    num_actions: int = 8
    max_len: int = 128
    dtype: torch.dtype = field(default=torch.float64)

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by the head count")


@dataclass
class Condition:
    """Action id plus per-frame joint guidance with a visibility mask.

    mask[s] = True means frame s carries known joint positions (history);
    masked-out frames are zero-filled before encoding.
    """

    action_id: int
    joints: torch.Tensor  # (S, K, 3) or (B, S, K, 3)
    mask: torch.Tensor    # (S,) or (B, S) bool

    def __post_init__(self):
        if self.joints.shape[:-2] != self.mask.shape:
            raise ValueError("joint and mask shapes disagree")
        if self.mask.any():
            visible = self.joints[self.mask]
            if not torch.isfinite(visible).all():
                raise ValueError("visible joint guidance must be finite")


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of scalar positions, (...,) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=positions.dtype, device=positions.device)
        * (-math.log(10000.0) / max(half - 1, 1)))
    ang = positions.unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class SelfAttention(nn.Module):
    def __init__(self, width, heads, dtype):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q = nn.Linear(width, width, dtype=dtype)
        self.k = nn.Linear(width, width, dtype=dtype)
        self.v = nn.Linear(width, width, dtype=dtype)
        self.out = nn.Linear(width, width, dtype=dtype)

    def forward(self, h):
        b, n, w = h.shape
        def split(x):
            return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, n, w)
        return self.out(mixed)


class Block(nn.Module):
    def __init__(self, width, heads, dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(width, dtype=dtype)
        self.attn = SelfAttention(width, heads, dtype)
        self.ln2 = nn.LayerNorm(width, dtype=dtype)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width, dtype=dtype),
            nn.GELU(),
            nn.Linear(4 * width, width, dtype=dtype),
        )

    def forward(self, h):
        h = h + self.attn(self.ln1(h))
        h = h + self.mlp(self.ln2(h))
        return h


class DenoiserNet(nn.Module):
    """Sequence model phi(x_t, t, c) -> x_hat0 over pose vectors.

    Tokens are one conditioning token (timestep + action) followed by one
    token per frame (pose projection + masked-joint guidance + position).
    Per-block residuals can be injected by a control branch.
    """

    def __init__(self, cfg: DenoiserConfig = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.cfg = cfg
        dt = cfg.dtype
        self.in_proj = nn.Linear(cfg.pose_dim, cfg.width, dtype=dt)
        self.joint_enc = nn.Linear(cfg.num_joints * 3 + 1, cfg.width, dtype=dt)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.width, cfg.width, dtype=dt),
            nn.GELU(),
            nn.Linear(cfg.width, cfg.width, dtype=dt),
        )
        self.action_emb = nn.Embedding(cfg.num_actions, cfg.width, dtype=dt)
        self.blocks = nn.ModuleList(
            [Block(cfg.width, cfg.heads, dt) for _ in range(cfg.blocks)])
        self.out_proj = nn.Linear(cfg.width, cfg.pose_dim, dtype=dt)

    def frame_features(self, x: torch.Tensor, cond: Condition) -> torch.Tensor:
        """Per-frame input features (the motion feature the controller taps)."""
        x, cond, squeeze = self._batched(x, cond)
        feats = self._frame_features(x, cond)
        return feats.squeeze(0) if squeeze else feats

    def _frame_features(self, x, cond):
        b, s, _ = x.shape
        joints = cond.joints.reshape(b, s, -1)
        mask = cond.mask.to(x.dtype).unsqueeze(-1)
        guidance = torch.cat([joints * mask, mask], dim=-1)
        pos = sinusoidal_embedding(
            torch.arange(1, s + 1, dtype=x.dtype, device=x.device), self.cfg.width)
        return self.in_proj(x) + self.joint_enc(guidance) + pos

    @staticmethod
    def _batched(x, cond):
        if x.dim() == 2:
            act = torch.as_tensor([cond.action_id]) if isinstance(cond.action_id, int) \
                else cond.action_id.reshape(1)
            cond = Condition(act, cond.joints.unsqueeze(0), cond.mask.unsqueeze(0))
            return x.unsqueeze(0), cond, True
        return x, cond, False

    def input_sequence(self, x: torch.Tensor, t, cond: Condition) -> torch.Tensor:
        """Embedded token sequence, (B, S+1, width): cond token then frames.

        This is the sequence the transformer blocks consume; a control branch
        mirrors the main blocks starting from these same features.
        """
        b, s, _ = x.shape
        if s > self.cfg.max_len:
            raise ValueError(f"sequence length {s} exceeds max_len {self.cfg.max_len}")
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        action = torch.as_tensor(cond.action_id).reshape(-1)
        if action.numel() == 1:
            action = action.expand(b)
        cond_tok = self.time_mlp(sinusoidal_embedding(t, self.cfg.width)) \
            + self.action_emb(action)
        return torch.cat([cond_tok.unsqueeze(1), self._frame_features(x, cond)], dim=1)

    def forward(self, x: torch.Tensor, t, cond: Condition, residuals=None) -> torch.Tensor:
        x, cond, squeeze = self._batched(x, cond)
        h = self.input_sequence(x, t, cond)
        if residuals is not None and len(residuals) != len(self.blocks):
            raise ValueError("one residual per block is required")
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            if residuals is not None:
                h = h + residuals[i]
        out = self.out_proj(h[:, 1:, :])
        return out.squeeze(0) if squeeze else out


def predict_x0(net: DenoiserNet, x_t: torch.Tensor, t, cond: Condition,
               residuals=None) -> torch.Tensor:
    """One denoiser evaluation; fails fast on non-finite activations."""
    out = net(x_t, t, cond, residuals=residuals)
    if not torch.isfinite(out).all():
        raise FloatingPointError("denoiser produced non-finite output")
    return out


def build_net(cfg: DenoiserConfig, seed: int = 0) -> DenoiserNet:
    """Construct with deterministic parameter init (seeds the global rng)."""
    torch.manual_seed(seed)
    return DenoiserNet(cfg)
