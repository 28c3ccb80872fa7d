"""Debug raster dumps for tri-plane maps (PGM/PPM, no image deps)."""
from __future__ import annotations

import os

import numpy as np

_SAFE = {"+x": "px", "-x": "nx", "+y": "py", "-y": "ny", "-z": "nz_down"}


def write_pgm16(path, gray: np.ndarray) -> None:
    """16-bit grayscale PGM (P5, big-endian sample order per the format)."""
    g = np.asarray(gray)
    if g.ndim != 2:
        raise ValueError("expected a 2-D array")
    g = np.clip(np.round(g), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n65535\n".encode("ascii"))
        f.write(g.tobytes())


def write_pgm8(path, gray: np.ndarray) -> None:
    g = np.asarray(gray)
    if g.ndim != 2:
        raise ValueError("expected a 2-D array")
    g = np.clip(np.round(g), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii"))
        f.write(g.tobytes())


def write_ppm8(path, rgb: np.ndarray) -> None:
    c = np.asarray(rgb)
    if c.ndim != 3 or c.shape[2] != 3:
        raise ValueError("expected an (h, w, 3) array")
    c = np.clip(np.round(c), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{c.shape[1]} {c.shape[0]}\n255\n".encode("ascii"))
        f.write(c.tobytes())


def dump_triplane(maps, out_dir) -> list:
    """Write depth (16-bit), rgb (8-bit) and label (8-bit) rasters per map."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, m in maps.items():
        stem = _SAFE[name]
        depth_path = os.path.join(out_dir, f"{stem}_depth.pgm")
        write_pgm16(depth_path, m.depth / m.far_depth * 65535.0)
        rgb_path = os.path.join(out_dir, f"{stem}_rgb.ppm")
        write_ppm8(rgb_path, m.rgb * 255.0)
        label_path = os.path.join(out_dir, f"{stem}_label.pgm")
        write_pgm8(label_path, m.label)
        written += [depth_path, rgb_path, label_path]
    return written
