"""Geometric augmentation: composed affine warps with bilinear resampling.

Matrices follow the inverse-warp convention: an :class:`AffineSpec` maps an
*output* pixel coordinate ``(x, y, 1)`` (column, row) to the *source*
coordinate that is sampled. Pixel centres sit on integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max_deg: float = 10.0
    translate_max_frac: float = 0.1
    shear_max_deg: float = 5.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    stretch_range: tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.5
    crop_to: tuple[int, int] = (120, 120)
    fill: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if self.rotation_max_deg < 0 or self.shear_max_deg < 0:
            raise ValueError("rotation/shear ranges must be non-negative")
        if self.shear_max_deg >= 90:
            raise ValueError("shear_max_deg must be below 90")
        if not 0 <= self.translate_max_frac <= 0.5:
            raise ValueError("translate_max_frac must be in [0, 0.5]")
        lo, hi = self.scale_range
        if not 0 < lo <= 1 <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= 1 <= hi, got {self.scale_range}")
        lo, hi = self.stretch_range
        if not 0 < lo <= hi:
            raise ValueError(f"stretch_range must satisfy 0 < lo <= hi, got {self.stretch_range}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")
        if min(self.crop_to) < 1:
            raise ValueError("crop_to must be positive")
        if not 0 <= self.fill <= 1:
            raise ValueError("fill must be in [0, 1]")

    @classmethod
    def off(cls, crop_to=(128, 128)) -> "AugmentConfig":
        """No random geometry; only the deterministic center crop/resize remains."""
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), (1.0, 1.0), 0.0, tuple(crop_to), 0.0, False)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AffineSpec:
    matrix: np.ndarray  # 2x3, output -> source
    flip: bool = False
    shape: tuple[int, int] = (128, 128)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(2, 3)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    def homogeneous(self, include_flip: bool = True) -> np.ndarray:
        m = np.vstack([self.matrix, [0.0, 0.0, 1.0]])
        if include_flip and self.flip:
            m = m @ _hflip(self.shape[1])
        return m


def _hflip(width: int) -> np.ndarray:
    return np.array([[-1.0, 0.0, width - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def _about(center: tuple[float, float], m: np.ndarray) -> np.ndarray:
    cx, cy = center
    t = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    ti = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    return t @ m @ ti


def inverse_matrix(shape, rotation_deg=0.0, translate=(0.0, 0.0), shear_deg=0.0,
                   scale=1.0, stretch=(1.0, 1.0)) -> np.ndarray:
    """Inverse (output -> source) 3x3 matrix of the forward warp.

    The forward warp applies, about the image centre, scale, then stretch,
    shear and rotation, and finally translates by ``translate`` pixels. Each
    factor is inverted in closed form so zero parameters give an exact
    identity.
    """
    h, w = shape
    th = math.radians(rotation_deg)
    c, s = math.cos(th), math.sin(th)
    rot_inv = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    shear_inv = np.array([[1.0, -math.tan(math.radians(shear_deg)), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    sx, sy = scale * stretch[0], scale * stretch[1]
    scale_inv = np.diag([1.0 / sx, 1.0 / sy, 1.0])
    tr_inv = np.array([[1.0, 0.0, -translate[0]], [0.0, 1.0, -translate[1]], [0.0, 0.0, 1.0]])
    core = scale_inv @ shear_inv @ rot_inv
    return _about(((w - 1) / 2.0, (h - 1) / 2.0), core) @ tr_inv


def sample_augmentation(cfg: AugmentConfig, rng_seed: int, shape=(128, 128)) -> AffineSpec:
    """Draw one random warp. Deterministic in ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    h, w = shape
    rot = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    tx, ty = rng.uniform(-cfg.translate_max_frac, cfg.translate_max_frac, size=2) * (w, h)
    shear = rng.uniform(-cfg.shear_max_deg, cfg.shear_max_deg)
    scale = rng.uniform(*cfg.scale_range)
    stretch = tuple(rng.uniform(*cfg.stretch_range, size=2))
    flip = bool(rng.random() < cfg.flip_prob)
    m = inverse_matrix(shape, rot, (tx, ty), shear, scale, stretch)
    params = {"rotation_deg": rot, "translate": (tx, ty), "shear_deg": shear,
              "scale": scale, "stretch": stretch, "flip": flip}
    return AffineSpec(m[:2], flip, tuple(shape), params)


def compose(outer: AffineSpec, inner: AffineSpec) -> AffineSpec:
    """Spec equivalent to warping with ``inner`` and then with ``outer``.

    Flips are folded into the matrix, so the result never carries a flag.
    """
    if tuple(outer.shape) != tuple(inner.shape):
        raise ValueError("cannot compose specs for different image shapes")
    m = inner.homogeneous() @ outer.homogeneous()
    return AffineSpec(m[:2], False, tuple(inner.shape))


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float) -> np.ndarray:
    """Sample ``img`` [H, W] at float coords; neighbours outside the image read ``fill``."""
    h, w = img.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    padded = np.pad(img, 1, constant_values=fill)

    def at(yy, xx):
        yy = np.clip(yy + 1, 0, h + 1)
        xx = np.clip(xx + 1, 0, w + 1)
        return padded[yy, xx]

    top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx
    bot = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bot * fy


def apply_affine(img: np.ndarray, spec: AffineSpec, fill: float = 0.0) -> np.ndarray:
    """Inverse-warp ``img`` [1, H, W] through ``spec``; the flip is applied after the warp."""
    if img.ndim != 3 or img.shape[0] != 1:
        raise ValueError(f"expected an image of shape [1, H, W], got {img.shape}")
    if abs(spec.det) < 1e-12:
        raise ValueError("affine matrix is singular")
    _, h, w = img.shape
    src = img[0].astype(np.float64, copy=False)
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    m = spec.matrix
    xs = m[0, 0] * jj + m[0, 1] * ii + m[0, 2]
    ys = m[1, 0] * jj + m[1, 1] * ii + m[1, 2]
    out = _bilinear(src, xs, ys, fill)
    # the samples are convex combinations; clip away rounding excursions
    lo, hi = min(src.min(), fill), max(src.max(), fill)
    np.clip(out, lo, hi, out=out)
    if spec.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out[None]).astype(img.dtype, copy=False)


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resize of a [H, W] array, pixel-centre aligned, edge clamped."""
    h, w = img.shape
    th, tw = size
    if (th, tw) == (h, w):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    ylo, yhi, fy = axis(h, th)
    xlo, xhi, fx = axis(w, tw)
    rows = img[ylo] * (1 - fy)[:, None] + img[yhi] * fy[:, None]
    return rows[:, xlo] * (1 - fx) + rows[:, xhi] * fx


def crop_resize(img: np.ndarray, crop_to, target=(128, 128), mode: str = "center",
                seed: int | None = None) -> np.ndarray:
    """Crop ``img`` [1, H, W] to ``crop_to`` (center or random) and resize to ``target``."""
    _, h, w = img.shape
    ch, cw = crop_to
    if ch > h or cw > w:
        raise ValueError(f"crop {tuple(crop_to)} larger than image {(h, w)}")
    if mode == "center":
        top, left = (h - ch) // 2, (w - cw) // 2
    elif mode == "random":
        rng = np.random.default_rng(seed)
        top, left = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
    else:
        raise ValueError(f"mode must be 'center' or 'random', got {mode!r}")
    crop = img[0, top:top + ch, left:left + cw]
    out = resize_bilinear(crop, tuple(target))
    return out[None].astype(img.dtype, copy=False)


def augment_image(img: np.ndarray, cfg: AugmentConfig, seed: int, target=(128, 128)) -> np.ndarray:
    """Training-time pipeline: random warp, random crop, resize to ``target``."""
    if not cfg.enabled:
        return eval_view(img, cfg, target)
    ss = np.random.SeedSequence(seed)
    warp_seed, crop_seed = (int(s) for s in ss.generate_state(2))
    spec = sample_augmentation(cfg, warp_seed, img.shape[1:])
    warped = apply_affine(img, spec, cfg.fill)
    crop = (min(cfg.crop_to[0], img.shape[1]), min(cfg.crop_to[1], img.shape[2]))
    return crop_resize(warped, crop, target, "random", crop_seed)


def eval_view(img: np.ndarray, cfg: AugmentConfig, target=(128, 128)) -> np.ndarray:
    """Deterministic evaluation preprocessing: center crop and resize."""
    crop = (min(cfg.crop_to[0], img.shape[1]), min(cfg.crop_to[1], img.shape[2]))
    return crop_resize(img, crop, target, "center")
