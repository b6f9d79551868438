"""Procedural radiograph-like corpus used in place of the real image archive.

Each class is one (primitive, orientation, multiplicity) combination drawn
bright over a noisy soft-tissue background. Position, size, rotation and
contrast jitter per image keep a raw-pixel linear model well below the
accuracy a small CNN reaches. Labels are four-axis dash-separated codes so
the corpus exercises the same flattening path as real hierarchical labels.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .data import Record, save_image, write_records

PRIMITIVES = ("bar", "ellipse", "ring", "cross", "tee", "vee")
MAX_CLASSES = 2 * 2 * len(PRIMITIVES)
SIZE = 128


def class_table() -> list[tuple[str, int, int, str]]:
    """All (primitive, orientation_deg, copies, label_code) combinations in class order."""
    out = []
    for p, prim in enumerate(PRIMITIVES):
        for o, orient in enumerate((0, 90)):
            for copies in (1, 2):
                code = f"1121-{120 + 10 * o}-{200 + 10 * p}-{700 + copies}"
                out.append((prim, orient, copies, code))
    return out


def _capsule(x, y, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(x - x0 - t * dx, y - y0 - t * dy)


def _soft(dist, width):
    # 1 inside, smooth 1.5 px edge
    return np.clip((width - dist) / 1.5 + 0.5, 0.0, 1.0)


def _primitive(name: str, x, y) -> np.ndarray:
    if name == "bar":
        return _soft(_capsule(x, y, -22, 0, 22, 0), 5.0)
    if name == "ellipse":
        r = np.sqrt((x / 22.0) ** 2 + (y / 10.0) ** 2)
        return _soft((r - 1.0) * 10.0, 0.0)
    if name == "ring":
        r = np.sqrt((x / 22.0) ** 2 + (y / 11.0) ** 2)
        return _soft(np.abs(r - 1.0) * 11.0, 2.5)
    if name == "cross":
        d = np.minimum(_capsule(x, y, -22, 0, 22, 0), _capsule(x, y, 0, -10, 0, 10))
        return _soft(d, 3.5)
    if name == "tee":
        d = np.minimum(_capsule(x, y, -20, -10, 20, -10), _capsule(x, y, 0, -10, 0, 14))
        return _soft(d, 3.5)
    if name == "vee":
        d = np.minimum(_capsule(x, y, -18, -12, 0, 12), _capsule(x, y, 0, 12, 18, -12))
        return _soft(d, 3.5)
    raise ValueError(name)


def render(prim: str, orient_deg: float, copies: int, rng: np.random.Generator) -> np.ndarray:
    """Render one [SIZE, SIZE] image in [0, 1]."""
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    c = (SIZE - 1) / 2.0
    # soft-tissue body
    bx, by = c + rng.normal(0, 6, 2)
    ba, bb = rng.uniform(40, 58, 2)
    body = np.exp(-np.maximum(((xx - bx) / ba) ** 2 + ((yy - by) / bb) ** 2 - 1.0, 0.0) * 4.0)
    img = rng.uniform(0.15, 0.3) * body
    for _ in range(rng.integers(2, 5)):
        px, py = rng.uniform(16, SIZE - 16, 2)
        img += rng.uniform(0.05, 0.15) * np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * rng.uniform(4, 10) ** 2))
    # class structure
    theta = math.radians(orient_deg + rng.uniform(-12, 12))
    scale = rng.uniform(0.85, 1.15)
    cx, cy = c + rng.uniform(-14, 14, 2)
    ct, st = math.cos(theta), math.sin(theta)
    u = ((xx - cx) * ct + (yy - cy) * st) / scale
    v = (-(xx - cx) * st + (yy - cy) * ct) / scale
    if copies == 1:
        mask = _primitive(prim, u, v)
    else:
        k = 0.65
        mask = np.maximum(_primitive(prim, u / k, (v - 13) / k), _primitive(prim, u / k, (v + 13) / k))
    img += rng.uniform(0.45, 0.7) * mask
    img += rng.normal(0, 0.04, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_corpus(num_classes: int, per_class: int, seed: int, out_dir) -> list[Record]:
    """Write ``num_classes * per_class`` PNGs plus ``manifest.csv`` under ``out_dir``."""
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in [1, {MAX_CLASSES}], got {num_classes}")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for k, (prim, orient, copies, code) in enumerate(class_table()[:num_classes]):
        for i in range(per_class):
            rng = np.random.default_rng([seed, k, i])
            rel = f"images/c{k:02d}_{i:04d}.png"
            save_image(out / rel, render(prim, orient, copies, rng))
            records.append(Record(rel, code))
    write_records(out / "manifest.csv", records)
    return records


def synthetic_arrays(num_classes: int, per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """In-memory variant: float32 images [N, 1, SIZE, SIZE] (8-bit quantised like the PNGs) and labels."""
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in [1, {MAX_CLASSES}], got {num_classes}")
    imgs, labels = [], []
    for k, (prim, orient, copies, _) in enumerate(class_table()[:num_classes]):
        for i in range(per_class):
            img = render(prim, orient, copies, np.random.default_rng([seed, k, i]))
            imgs.append(np.round(img * 255) / 255)
            labels.append(k)
    return np.asarray(imgs, dtype=np.float32)[:, None], np.asarray(labels, dtype=np.int64)
