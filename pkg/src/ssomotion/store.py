"""Sparse scene semantic occupancy (SSO) store.

A scene is a sparse voxel map: each occupied cell carries an rgba color and a
semantic label id from a shared vocabulary. The on-disk compact form stores
8 numbers per voxel (center xyz, rgba, label id).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_VOXEL_SIZE = 0.04  # meters

_IDX_BIAS = 1 << 20  # packed-key bias; voxel indices must stay in (-2^20, 2^20)
_SSO_MAGIC = b"SSO1"


class SSOParseError(ValueError):
    """Malformed compact-SSO file; message carries the failing byte offset."""


@dataclass(frozen=True)
class LabelVocab:
    """Ordered semantic label vocabulary. Id 0 is always the reserved "empty"."""

    names: tuple

    def __post_init__(self):
        if len(self.names) == 0:
            raise ValueError("vocabulary must not be empty")
        if self.names[0] != "empty":
            raise ValueError('label id 0 must be named "empty"')
        if len(set(self.names)) != len(self.names):
            raise ValueError("label names must be unique")

    def __len__(self):
        return len(self.names)

    def __contains__(self, label_id: int) -> bool:
        return 0 <= int(label_id) < len(self.names)

    def name_of(self, label_id: int) -> str:
        if label_id not in self:
            raise KeyError(f"label id {label_id} not in vocabulary")
        return self.names[int(label_id)]

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"label name {name!r} not in vocabulary") from None

    @staticmethod
    def from_pairs(pairs) -> "LabelVocab":
        """Build from (id, name) pairs; ids must be contiguous from 0."""
        pairs = sorted((int(i), str(n)) for i, n in pairs)
        ids = [i for i, _ in pairs]
        if ids != list(range(len(ids))):
            raise ValueError(f"label ids must be contiguous from 0, got {ids}")
        return LabelVocab(tuple(n for _, n in pairs))


@dataclass(frozen=True)
class VoxelRecord:
    """Payload of one occupied voxel.

    rgba channels are kept exactly float32-representable so the compact file
    round-trips bit-exactly.
    """

    rgba: tuple
    label_id: int

    def __post_init__(self):
        if len(self.rgba) != 4:
            raise ValueError("rgba must have 4 channels")
        for c in self.rgba:
            if not (0.0 <= c <= 1.0):
                raise ValueError(f"rgba channel {c} outside [0, 1]")
        if self.rgba[3] <= 0.0:
            raise ValueError("stored voxels must have alpha > 0")
        if self.label_id < 0:
            raise ValueError("label_id must be non-negative")


# Sentinel for unoccupied space (alpha 0, label "empty"); bypasses the
# alpha > 0 invariant that applies to stored voxels only.
EMPTY_RECORD = object.__new__(VoxelRecord)
object.__setattr__(EMPTY_RECORD, "rgba", (0.0, 0.0, 0.0, 0.0))
object.__setattr__(EMPTY_RECORD, "label_id", 0)


def _as_f32(x) -> float:
    return float(np.float32(x))


def _pack_keys(idx: np.ndarray) -> np.ndarray:
    """Pack (N,3) integer voxel indices into sortable int64 keys."""
    if np.any(np.abs(idx) >= _IDX_BIAS):
        raise ValueError("voxel index out of supported range (desk-scale scenes only)")
    b = idx.astype(np.int64) + _IDX_BIAS
    return (b[:, 0] << 42) | (b[:, 1] << 21) | b[:, 2]


@dataclass
class SparseSSO:
    """Compact sparse scene semantic occupancy.

    Immutable after construction. `origin` is the world position of the corner
    of voxel index (0, 0, 0) and must lie on the voxel lattice (an integer
    multiple of voxel_size per axis) so the compact file format, which stores
    voxel centers only, can reconstruct it exactly.
    """

    voxel_size: float
    origin: tuple
    cells: dict
    vocab: LabelVocab
    _sorted_keys: np.ndarray = field(default=None, repr=False, compare=False)
    _sorted_records: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (self.voxel_size > 0):
            raise ValueError("voxel_size must be > 0")
        if len(self.cells) == 0:
            self.origin = (0.0, 0.0, 0.0)
        self.origin = tuple(float(v) for v in self.origin)
        for v in self.origin:
            if not np.isfinite(v):
                raise ValueError("origin must be finite")
            if abs(round(v / self.voxel_size) * self.voxel_size - v) > 1e-9:
                raise ValueError("origin must be an integer multiple of voxel_size")
        for key, rec in self.cells.items():
            if rec.label_id not in self.vocab:
                raise ValueError(f"cell {key}: label id {rec.label_id} not in vocabulary")

    def __len__(self):
        return len(self.cells)

    def __eq__(self, other):
        return (
            isinstance(other, SparseSSO)
            and self.voxel_size == other.voxel_size
            and self.origin == other.origin
            and self.cells == other.cells
            and self.vocab == other.vocab
        )

    def voxel_index(self, p) -> tuple:
        p = np.asarray(p, dtype=np.float64)
        idx = np.floor((p - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)
        return (int(idx[0]), int(idx[1]), int(idx[2]))

    def voxel_center(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def occupied_indices(self) -> np.ndarray:
        """All occupied voxel indices, lexicographically sorted, shape (N, 3)."""
        if not self.cells:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array(sorted(self.cells.keys()), dtype=np.int64)

    def _ensure_lookup(self):
        if self._sorted_keys is None:
            idx = self.occupied_indices()
            keys = _pack_keys(idx) if len(idx) else np.zeros(0, dtype=np.int64)
            self._sorted_keys = keys
            self._sorted_records = [self.cells[tuple(i)] for i in idx]

    def sample_many(self, points: np.ndarray):
        """Vectorized lookup of world points -> (occupied, rgb, label) arrays.

        Equivalent to calling sample_at per point; used by the sensor-grid
        sampling path where hundreds of thousands of queries are common.
        """
        self._ensure_lookup()
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx = np.floor((pts - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)
        occupied = np.zeros(len(pts), dtype=bool)
        rgb = np.zeros((len(pts), 3), dtype=np.float64)
        label = np.zeros(len(pts), dtype=np.int32)
        if len(self._sorted_keys) == 0:
            return occupied, rgb, label
        in_range = np.all(np.abs(idx) < _IDX_BIAS, axis=1)
        keys = np.where(in_range[:, None], idx, 0)
        keys = _pack_keys(keys)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.clip(pos, 0, len(self._sorted_keys) - 1)
        hit = in_range & (self._sorted_keys[pos] == keys)
        for i in np.nonzero(hit)[0]:
            rec = self._sorted_records[pos[i]]
            occupied[i] = True
            rgb[i] = rec.rgba[:3]
            label[i] = rec.label_id
        return occupied, rgb, label

    def filter_labels(self, keep) -> "SparseSSO":
        """New store keeping only cells whose label name or id is in `keep`."""
        keep_ids = {k if isinstance(k, int) else self.vocab.id_of(k) for k in keep}
        cells = {k: r for k, r in self.cells.items() if r.label_id in keep_ids}
        origin = self.origin if cells else (0.0, 0.0, 0.0)
        return SparseSSO(self.voxel_size, origin, cells, self.vocab)


def voxelize_points(points, voxel_size: float, vocab: LabelVocab) -> SparseSSO:
    """Voxelize labeled colored points into a sparse SSO.

    points: iterable of (xyz, rgba, label_id) or an (N, 8) array laid out as
    x y z r g b a label. Per voxel, color is the arithmetic mean of member
    points and the label is the mode (ties -> smallest label id). The grid
    origin is the componentwise floor of the minimum point to a voxel
    boundary. Points with alpha <= 0 mark empty space and are skipped.
    """
    if not (voxel_size > 0):
        raise ValueError("voxel_size must be > 0")
    if len(vocab) == 0:
        raise ValueError("vocabulary must not be empty")

    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=np.float64).reshape(-1, 8)
        xyz, rgba, labels = arr[:, 0:3], arr[:, 3:7], arr[:, 7].astype(np.int64)
    else:
        points = list(points)
        if len(points) == 0:
            xyz = np.zeros((0, 3))
            rgba = np.zeros((0, 4))
            labels = np.zeros(0, dtype=np.int64)
        else:
            xyz = np.array([p[0] for p in points], dtype=np.float64)
            rgba = np.array([p[1] for p in points], dtype=np.float64)
            labels = np.array([int(p[2]) for p in points], dtype=np.int64)

    if not np.all(np.isfinite(xyz)):
        raise ValueError("point coordinates must be finite")
    if rgba.size and (rgba.min() < 0.0 or rgba.max() > 1.0):
        raise ValueError("rgba channels must lie in [0, 1]")
    bad = labels[(labels < 0) | (labels >= len(vocab))]
    if bad.size:
        raise ValueError(f"invalid label id {int(bad[0])} (vocabulary size {len(vocab)})")

    solid = rgba[:, 3] > 0.0 if rgba.size else np.zeros(0, dtype=bool)
    xyz, rgba, labels = xyz[solid], rgba[solid], labels[solid]
    if len(xyz) == 0:
        return SparseSSO(voxel_size, (0.0, 0.0, 0.0), {}, vocab)

    origin = np.floor(xyz.min(axis=0) / voxel_size) * voxel_size
    idx = np.floor((xyz - origin) / voxel_size).astype(np.int64)
    keys = _pack_keys(idx)
    uniq, inverse = np.unique(keys, return_inverse=True)

    sums = np.zeros((len(uniq), 4), dtype=np.float64)
    np.add.at(sums, inverse, rgba)
    counts = np.bincount(inverse, minlength=len(uniq))
    means = sums / counts[:, None]

    # Mode with smallest-id tie break: count (voxel, label) pairs, then order
    # by (voxel, count desc, label asc) and keep the first row per voxel.
    pair = inverse.astype(np.int64) * len(vocab) + labels
    pair_u, pair_c = np.unique(pair, return_counts=True)
    pv, pl = pair_u // len(vocab), pair_u % len(vocab)
    order = np.lexsort((pl, -pair_c, pv))
    pv, pl = pv[order], pl[order]
    first = np.concatenate(([True], pv[1:] != pv[:-1]))
    mode_label = np.zeros(len(uniq), dtype=np.int64)
    mode_label[pv[first]] = pl[first]

    cells = {}
    uidx = np.stack([(uniq >> 42) - _IDX_BIAS, ((uniq >> 21) & 0x1FFFFF) - _IDX_BIAS,
                     (uniq & 0x1FFFFF) - _IDX_BIAS], axis=1)
    for row, (m, lab) in enumerate(zip(means, mode_label)):
        key = (int(uidx[row, 0]), int(uidx[row, 1]), int(uidx[row, 2]))
        cells[key] = VoxelRecord(tuple(_as_f32(c) for c in m), int(lab))
    return SparseSSO(voxel_size, tuple(origin), cells, vocab)


def sample_at(sso: SparseSSO, p) -> VoxelRecord:
    """Record of the voxel containing world point p, or the empty record."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("query point must be finite")
    return sso.cells.get(sso.voxel_index(p), EMPTY_RECORD)


def save_compact(sso: SparseSSO, path) -> None:
    """Write the compact binary form: magic, voxel_size, vocab, N x 8 floats.

    Records are voxel-center x y z, r g b a, label_id (stored as float32,
    integral), sorted lexicographically by voxel index for determinism.
    """
    with open(path, "wb") as f:
        f.write(_SSO_MAGIC)
        f.write(struct.pack("<d", sso.voxel_size))
        f.write(struct.pack("<I", len(sso.vocab)))
        for name in sso.vocab.names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(struct.pack("<Q", len(sso.cells)))
        for idx in sso.occupied_indices():
            rec = sso.cells[tuple(idx)]
            center = sso.voxel_center(idx)
            f.write(np.asarray([*center, *rec.rgba, rec.label_id], dtype="<f4").tobytes())


def load_compact(path) -> SparseSSO:
    """Read a compact-SSO file; raises SSOParseError naming the byte offset."""
    with open(path, "rb") as f:
        blob = f.read()

    def need(offset, n, what):
        if offset + n > len(blob):
            raise SSOParseError(f"truncated {what} at byte offset {offset}")
        return blob[offset:offset + n]

    if need(0, 4, "magic") != _SSO_MAGIC:
        raise SSOParseError("bad magic at byte offset 0")
    off = 4
    (voxel_size,) = struct.unpack("<d", need(off, 8, "voxel_size"))
    off += 8
    if not (voxel_size > 0):
        raise SSOParseError(f"non-positive voxel_size at byte offset {off - 8}")
    (n_names,) = struct.unpack("<I", need(off, 4, "vocab size"))
    off += 4
    names = []
    for _ in range(n_names):
        (ln,) = struct.unpack("<H", need(off, 2, "vocab name length"))
        off += 2
        names.append(need(off, ln, "vocab name").decode("utf-8"))
        off += ln
    vocab = LabelVocab(tuple(names))
    (n_cells,) = struct.unpack("<Q", need(off, 8, "record count"))
    off += 8

    rec_bytes = 8 * 4
    if off + n_cells * rec_bytes > len(blob):
        complete = (len(blob) - off) // rec_bytes
        raise SSOParseError(f"truncated record at byte offset {off + complete * rec_bytes}")
    raw = need(off, n_cells * rec_bytes, "record")
    data = np.frombuffer(raw, dtype="<f4").reshape(n_cells, 8).astype(np.float64)
    if n_cells == 0:
        if off + n_cells * rec_bytes != len(blob):
            raise SSOParseError(f"trailing bytes at byte offset {off}")
        return SparseSSO(voxel_size, (0.0, 0.0, 0.0), {}, vocab)
    if off + n_cells * rec_bytes != len(blob):
        raise SSOParseError(f"trailing bytes at byte offset {off + n_cells * rec_bytes}")

    labels_f = data[:, 7]
    if np.any(labels_f != np.round(labels_f)):
        bad = int(np.nonzero(labels_f != np.round(labels_f))[0][0])
        raise SSOParseError(f"non-integral label id at byte offset {off + bad * rec_bytes + 28}")
    labels = labels_f.astype(np.int64)
    if np.any((labels < 0) | (labels >= len(vocab))):
        bad = int(np.nonzero((labels < 0) | (labels >= len(vocab)))[0][0])
        raise SSOParseError(f"unknown label id {int(labels[bad])} at byte offset {off + bad * rec_bytes + 28}")

    # Reconstruct the lattice origin from the minimum stored center.
    origin = np.round((data[:, 0:3].min(axis=0) - 0.5 * voxel_size) / voxel_size) * voxel_size
    idx = np.round((data[:, 0:3] - origin) / voxel_size - 0.5).astype(np.int64)
    cells = {}
    for row in range(n_cells):
        key = (int(idx[row, 0]), int(idx[row, 1]), int(idx[row, 2]))
        if key in cells:
            raise SSOParseError(f"duplicate voxel at byte offset {off + row * rec_bytes}")
        try:
            rec = VoxelRecord(tuple(float(c) for c in data[row, 3:7]), int(labels[row]))
        except ValueError as e:
            raise SSOParseError(f"invalid record at byte offset {off + row * rec_bytes}: {e}") from None
        cells[key] = rec
    return SparseSSO(voxel_size, tuple(origin), cells, vocab)


def save_vocab(vocab: LabelVocab, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, name in enumerate(vocab.names):
            f.write(f"{i}\t{name}\n")


def load_vocab(path) -> LabelVocab:
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                ident, name = line.split("\t")
                pairs.append((int(ident), name))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'id<TAB>name'") from None
    return LabelVocab.from_pairs(pairs)
