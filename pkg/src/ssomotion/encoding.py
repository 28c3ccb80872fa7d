"""Unified semantic features and the tri-plane scene encoder.

Semantic label names are embedded in a high-dimensional table (loaded from a
file, or a deterministic hashed fallback), reduced once per label by a shared
linear layer, and scattered into the tri-plane label maps. Geometry (activated
depth), texture (rgb) and semantics are encoded by small per-family feature
extractors into a fixed block of scene tokens.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .store import LabelVocab
from .triplane import MAP_NAMES, TriPlaneMaps, activate_depth, normalize_color

DEFAULT_DIM_HIGH = 512
DEFAULT_DIM_LOW = 16


@dataclass
class EmbedTable:
    """Per-label-name embedding rows of a fixed width."""

    dim_high: int
    rows: dict  # name -> np.ndarray (dim_high,)

    def __post_init__(self):
        for name, vec in self.rows.items():
            if vec.shape != (self.dim_high,):
                raise ValueError(f"row {name!r} has width {vec.shape}, expected {self.dim_high}")
        if "empty" not in self.rows:
            raise ValueError('embedding table must contain a row for "empty"')

    def matrix(self, vocab: LabelVocab) -> np.ndarray:
        """Rows stacked in label-id order, (n_labels, dim_high)."""
        missing = [n for n in vocab.names if n not in self.rows]
        if missing:
            raise KeyError(f"embedding table is missing labels: {missing}")
        return np.stack([self.rows[n] for n in vocab.names])


def load_embed_table(path, vocab: LabelVocab) -> EmbedTable:
    """Parse the text table: header ``EMB <dim>`` then ``name<TAB>v1 v2 ...``."""
    rows = {}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2 or header[0] != "EMB":
            raise ValueError(f"{path}: expected header 'EMB <dim>'")
        dim = int(header[1])
        for lineno, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                name, values = line.split("\t")
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'name<TAB>values'") from None
            vec = np.array(values.split(), dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"{path}:{lineno}: row {name!r} has {len(vec)} values, expected {dim}")
            if name in rows:
                raise ValueError(f"{path}:{lineno}: duplicate row for label {name!r}")
            rows[name] = vec
    missing = [n for n in vocab.names if n not in rows]
    if missing:
        raise KeyError(f"embedding table is missing labels: {missing}")
    return EmbedTable(dim, rows)


def save_embed_table(table: EmbedTable, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"EMB {table.dim_high}\n")
        for name in sorted(table.rows):
            vals = " ".join(repr(float(v)) for v in table.rows[name])
            f.write(f"{name}\t{vals}\n")


def hash_embed(vocab: LabelVocab, dim_high: int = DEFAULT_DIM_HIGH, seed: int = 0) -> EmbedTable:
    """Deterministic unit-norm pseudo-random embedding per label name.

    Stable across runs and platforms: each row is seeded from a sha256 of the
    (seed, name) pair, independent of vocabulary order.
    """
    if dim_high <= 0:
        raise ValueError("dim_high must be > 0")
    rows = {}
    for name in vocab.names:
        digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
        gen = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
        vec = gen.standard_normal(dim_high)
        rows[name] = vec / np.linalg.norm(vec)
    return EmbedTable(dim_high, rows)


@dataclass
class ReductionLayer:
    """The one linear map shared by every label and every map."""

    weights: np.ndarray  # (dim_low, dim_high)
    bias: np.ndarray     # (dim_low,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("reduction layer shapes disagree")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("reduction layer must be finite")

    @property
    def dim_low(self):
        return self.weights.shape[0]

    @property
    def dim_high(self):
        return self.weights.shape[1]

    @staticmethod
    def init(dim_high: int, dim_low: int, seed: int = 0) -> "ReductionLayer":
        gen = np.random.Generator(np.random.PCG64(seed))
        w = gen.standard_normal((dim_low, dim_high)) / np.sqrt(dim_high)
        return ReductionLayer(w, np.zeros(dim_low))


def reduce_table(table: EmbedTable, layer: ReductionLayer) -> dict:
    """Apply the shared reduction once per label; returns name -> low vector."""
    if layer.dim_high != table.dim_high:
        raise ValueError(
            f"reduction expects width {layer.dim_high}, table has {table.dim_high}")
    return {name: layer.weights @ vec + layer.bias for name, vec in table.rows.items()}


def scatter_semantic(label_map: np.ndarray, reduced: dict, vocab: LabelVocab) -> np.ndarray:
    """Pixelwise embedding lookup: (d1, d2) label ids -> (d1, d2, dim) floats."""
    label_map = np.asarray(label_map)
    ids = np.unique(label_map)
    for i in ids:
        if int(i) not in vocab:
            raise KeyError(f"label id {int(i)} not in vocabulary")
        if vocab.name_of(int(i)) not in reduced:
            raise KeyError(f"no reduced embedding for label {vocab.name_of(int(i))!r}")
    dim = len(next(iter(reduced.values())))
    lut = np.zeros((len(vocab), dim))
    for i in range(len(vocab)):
        lut[i] = reduced[vocab.name_of(i)]
    return lut[label_map]


@dataclass
class SceneEncoderConfig:
    dim_low: int = DEFAULT_DIM_LOW
    conv_width: int = 32
    family_dim: int = 64
    tokens: tuple = (8, 64)
    sigma: float = 1.0
    dtype: torch.dtype = field(default=torch.float64)


class _FamilyEncoder(nn.Module):
    """Two strided conv layers + global average pool, shared across maps."""

    def __init__(self, in_channels, width, out_dim, dtype):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, stride=2, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1, dtype=dtype)
        self.act = nn.GELU()
        self.head = nn.Linear(2 * width, out_dim, dtype=dtype)

    def forward(self, maps):
        pooled = 0.0
        for m in maps:  # maps may differ in spatial size; weights are shared
            h = self.act(self.conv1(m.unsqueeze(0)))
            h = self.act(self.conv2(h))
            pooled = pooled + h.mean(dim=(2, 3)).squeeze(0)
        return self.head(pooled)


class SceneEncoder(nn.Module):
    """Encode five tri-plane maps into a fixed (L_s, C_t) token block."""

    def __init__(self, cfg: SceneEncoderConfig = None):
        super().__init__()
        cfg = cfg or SceneEncoderConfig()
        self.cfg = cfg
        self.sem = _FamilyEncoder(cfg.dim_low, cfg.conv_width, cfg.family_dim, cfg.dtype)
        self.geo = _FamilyEncoder(1, cfg.conv_width, cfg.family_dim, cfg.dtype)
        self.tex = _FamilyEncoder(3, cfg.conv_width, cfg.family_dim, cfg.dtype)
        n_tokens, token_dim = cfg.tokens
        self.proj = nn.Linear(3 * cfg.family_dim, n_tokens * token_dim, dtype=cfg.dtype)

    def forward(self, triplanes: TriPlaneMaps, semfeats: dict, sigma: float = None):
        sigma = self.cfg.sigma if sigma is None else sigma
        dt = self.cfg.dtype
        sem_maps, geo_maps, tex_maps = [], [], []
        for name in MAP_NAMES:
            m = triplanes[name]
            sf = semfeats[name]
            if tuple(sf.shape) != m.depth.shape + (self.cfg.dim_low,):
                raise ValueError(f"semantic feature map {name} has shape {tuple(sf.shape)}")
            if isinstance(sf, torch.Tensor):
                sem_maps.append(sf.to(dt).permute(2, 0, 1))
            else:
                sem_maps.append(torch.as_tensor(np.asarray(sf), dtype=dt).permute(2, 0, 1))
            geo_maps.append(torch.as_tensor(
                activate_depth(m.depth, sigma), dtype=dt).unsqueeze(0))
            tex_maps.append(torch.as_tensor(
                normalize_color(m.rgb), dtype=dt).permute(2, 0, 1))
        fused = torch.cat([self.sem(sem_maps), self.geo(geo_maps), self.tex(tex_maps)])
        n_tokens, token_dim = self.cfg.tokens
        return self.proj(fused).reshape(n_tokens, token_dim)


def encode_scene(encoder: SceneEncoder, triplanes: TriPlaneMaps, semfeats: dict,
                 sigma: float = None) -> torch.Tensor:
    """Functional wrapper; fails fast on non-finite parameters or output."""
    for p in encoder.parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError("scene encoder has non-finite parameters")
    tokens = encoder(triplanes, semfeats, sigma)
    if not torch.isfinite(tokens).all():
        raise FloatingPointError("scene tokens are non-finite")
    return tokens


def semantic_feature_maps(triplanes: TriPlaneMaps, reduced: dict,
                          vocab: LabelVocab) -> dict:
    """Scatter reduced embeddings into every map's label raster."""
    return {name: scatter_semantic(triplanes[name].label, reduced, vocab)
            for name in MAP_NAMES}


class ScenePipeline(nn.Module):
    """Trainable label-to-token path: shared reduction, scatter, encoder.

    The high-dimensional embedding table is a frozen buffer; the reduction is
    applied once per label per call, then scattered by lookup, so its cost is
    independent of map resolution.
    """

    def __init__(self, vocab: LabelVocab, table: EmbedTable,
                 cfg: SceneEncoderConfig = None):
        super().__init__()
        cfg = cfg or SceneEncoderConfig()
        self.cfg = cfg
        self.vocab = vocab
        self.register_buffer(
            "table", torch.as_tensor(table.matrix(vocab), dtype=cfg.dtype))
        self.reduce = nn.Linear(table.dim_high, cfg.dim_low, dtype=cfg.dtype)
        self.encoder = SceneEncoder(cfg)

    def tokens(self, triplanes: TriPlaneMaps, sigma: float = None) -> torch.Tensor:
        reduced = self.reduce(self.table)  # (n_labels, dim_low), once per label
        semfeats = {name: reduced[torch.as_tensor(
            triplanes[name].label, dtype=torch.long)] for name in MAP_NAMES}
        return self.encoder(triplanes, semfeats, sigma)

    def reduction_layer(self) -> ReductionLayer:
        """Numpy view of the current reduction weights (for the table ops)."""
        return ReductionLayer(self.reduce.weight.detach().numpy().copy(),
                              self.reduce.bias.detach().numpy().copy())
