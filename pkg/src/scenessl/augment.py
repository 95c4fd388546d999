"""Stochastic view generation for the contrastive objectives.

Images are float arrays (C, H, W) with values in [0, 1]. Transforms run in
policy order; after each photometric step values are clipped back to
[0, 1], and the final normalisation maps them to
``[(0 - mean)/std, (1 - mean)/std]`` per channel.

Resizing is bilinear with half-pixel centres: output pixel ``i`` samples
source coordinate ``(i + 0.5) * in/out - 0.5``, clamped to the valid range.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .numerics import Rng, Tensor

log = logging.getLogger(__name__)

degenerate_crop_fallbacks = 0


@dataclass(frozen=True)
class CropSpec:
    scale: tuple[float, float] = (0.2, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)


@dataclass(frozen=True)
class ColorJitterSpec:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    p: float = 0.8


@dataclass(frozen=True)
class BlurSpec:
    kernel: int = 7
    sigma: tuple[float, float] = (0.1, 2.0)
    p: float = 0.5


@dataclass(frozen=True)
class CutoutSpec:
    size: int = 16
    p: float = 0.0


@dataclass(frozen=True)
class RotationSpec:
    degrees: float = 15.0
    p: float = 0.0


@dataclass(frozen=True)
class AugmentPolicy:
    output_size: tuple[int, int] = (64, 64)
    crop: CropSpec = field(default_factory=CropSpec)
    flip_p: float = 0.5
    color_jitter: ColorJitterSpec = field(default_factory=ColorJitterSpec)
    grayscale_p: float = 0.2
    blur: BlurSpec = field(default_factory=BlurSpec)
    cutout: CutoutSpec = field(default_factory=CutoutSpec)
    rotation: RotationSpec = field(default_factory=RotationSpec)
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        probs = {"flip_p": self.flip_p, "color_jitter.p": self.color_jitter.p, "grayscale_p": self.grayscale_p,
                 "blur.p": self.blur.p, "cutout.p": self.cutout.p, "rotation.p": self.rotation.p}
        for name, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.crop.scale
        if not (0 < lo <= hi <= 1):
            raise ContractError(f"crop scale range must satisfy 0 < lo <= hi <= 1, got {self.crop.scale}")
        if min(self.std) <= 0:
            raise ContractError("normalisation std must be positive")

    @classmethod
    def identity(cls, output_size=(64, 64), channels: int = 3) -> "AugmentPolicy":
        return cls(output_size=tuple(output_size), crop=CropSpec(scale=(1.0, 1.0), ratio=(1.0, 1.0)), flip_p=0.0,
                   color_jitter=ColorJitterSpec(p=0.0), grayscale_p=0.0, blur=BlurSpec(p=0.0),
                   cutout=CutoutSpec(p=0.0), rotation=RotationSpec(p=0.0),
                   mean=(0.0,) * channels, std=(1.0,) * channels)

    @classmethod
    def finetune(cls, output_size=(64, 64)) -> "AugmentPolicy":
        """Light policy for supervised fine-tuning: mild crops and flips only."""
        return cls(output_size=tuple(output_size), crop=CropSpec(scale=(0.6, 1.0)),
                   color_jitter=ColorJitterSpec(p=0.0), grayscale_p=0.0, blur=BlurSpec(p=0.0))

    def value_range(self) -> tuple[np.ndarray, np.ndarray]:
        mean, std = np.asarray(self.mean), np.asarray(self.std)
        return (0.0 - mean) / std, (1.0 - mean) / std

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        d = dict(d)
        subs = {"crop": CropSpec, "color_jitter": ColorJitterSpec, "blur": BlurSpec, "cutout": CutoutSpec,
                "rotation": RotationSpec}
        for key, kind in subs.items():
            if key in d:
                sub = {k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()}
                d[key] = kind(**sub)
        for key in ("output_size", "mean", "std"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AugmentPolicy":
        return cls.from_dict(json.loads(text))


# -- primitive transforms -------------------------------------------------

def _axis_coords(n_in: int, n_out: int, start: float, length: float):
    pos = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (pos - lo)


def resize_region(image: np.ndarray, box: tuple[float, float, float, float], size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of ``box = (top, left, height, width)`` to ``size = (H, W)``."""
    c, h, w = image.shape
    top, left, bh, bw = box
    y0, y1, fy = _axis_coords(h, size[0], top, bh)
    x0, x1, fx = _axis_coords(w, size[1], left, bw)
    rows = image[:, y0, :] * (1 - fy)[None, :, None] + image[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]
    return out.astype(image.dtype, copy=False)


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if image.shape[1:] == tuple(size):
        return image.copy()
    return resize_region(image, (0.0, 0.0, image.shape[1], image.shape[2]), size)


def _sample_crop(h: int, w: int, spec: CropSpec, rng: Rng):
    global degenerate_crop_fallbacks
    if spec.scale == (1.0, 1.0):
        return 0.0, 0.0, float(h), float(w)
    area = h * w
    log_ratio = (math.log(spec.ratio[0]), math.log(spec.ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*spec.scale)
        ratio = math.exp(rng.uniform(*log_ratio))
        cw = math.sqrt(target * ratio)
        ch = math.sqrt(target / ratio)
        if 1 <= cw <= w and 1 <= ch <= h:
            top = rng.uniform(0, h - ch)
            left = rng.uniform(0, w - cw)
            return top, left, ch, cw
    degenerate_crop_fallbacks += 1
    log.warning("crop sampling failed 10 times; using the full frame")
    return 0.0, 0.0, float(h), float(w)


def _grayscale(img: np.ndarray) -> np.ndarray:
    if img.shape[0] != 3:
        return img
    g = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.broadcast_to(g, img.shape).copy()


def _rgb_to_hsv(img):
    r, g, b = img
    mx = img.max(axis=0)
    mn = img.min(axis=0)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, (g - b) / safe % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4)) / 6.0
    h = np.where(d > 0, h, 0.0)
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s, mx


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros((3,) + h.shape)
    for k, (a, b, c) in enumerate(choices):
        m = i == k
        out[0][m], out[1][m], out[2][m] = a[m], b[m], c[m]
    return out


def _color_jitter(img: np.ndarray, spec: ColorJitterSpec, rng: Rng) -> np.ndarray:
    # fixed order: brightness, contrast, saturation, hue
    out = img
    if spec.brightness:
        out = np.clip(out * rng.uniform(1 - spec.brightness, 1 + spec.brightness), 0, 1)
    if spec.contrast:
        m = _grayscale(out).mean()
        out = np.clip((out - m) * rng.uniform(1 - spec.contrast, 1 + spec.contrast) + m, 0, 1)
    if spec.saturation:
        g = _grayscale(out)
        out = np.clip((out - g) * rng.uniform(1 - spec.saturation, 1 + spec.saturation) + g, 0, 1)
    if spec.hue and out.shape[0] == 3:
        h, s, v = _rgb_to_hsv(out)
        out = np.clip(_hsv_to_rgb((h + rng.uniform(-spec.hue, spec.hue)) % 1.0, s, v), 0, 1)
    return out


def _blur(img: np.ndarray, spec: BlurSpec, rng: Rng) -> np.ndarray:
    sigma = rng.uniform(*spec.sigma)
    radius = spec.kernel // 2
    return np.stack([ndimage.gaussian_filter(ch, sigma, mode="reflect", truncate=radius / sigma) for ch in img])


def _rotate(img: np.ndarray, spec: RotationSpec, rng: Rng) -> np.ndarray:
    angle = rng.uniform(-spec.degrees, spec.degrees)
    return np.clip(np.stack([ndimage.rotate(ch, angle, reshape=False, order=1, mode="reflect") for ch in img]), 0, 1)


def _cutout(img: np.ndarray, spec: CutoutSpec, rng: Rng) -> np.ndarray:
    _, h, w = img.shape
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    half = spec.size // 2
    out = img.copy()
    out[:, max(cy - half, 0):cy + half, max(cx - half, 0):cx + half] = 0.0
    return out


def apply_policy(image: np.ndarray, policy: AugmentPolicy, rng: Rng) -> np.ndarray:
    """One view of ``image`` (C, H, W in [0, 1]); returns a float32 array."""
    img = np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    box = _sample_crop(h, w, policy.crop, rng)
    img = resize_region(img, box, policy.output_size)
    if rng.random() < policy.flip_p:
        img = img[:, :, ::-1]
    if rng.random() < policy.rotation.p:
        img = _rotate(img, policy.rotation, rng)
    if rng.random() < policy.color_jitter.p:
        img = _color_jitter(img, policy.color_jitter, rng)
    if rng.random() < policy.grayscale_p:
        img = _grayscale(img)
    if rng.random() < policy.blur.p:
        img = _blur(img, policy.blur, rng)
    if rng.random() < policy.cutout.p:
        img = _cutout(img, policy.cutout, rng)
    img = np.clip(img, 0.0, 1.0)
    mean = np.asarray(policy.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(policy.std, dtype=np.float64)[:, None, None]
    return ((img - mean) / std).astype(np.float32)


def make_views(image, policy: AugmentPolicy, rng: Rng, n_views: int = 2) -> list[Tensor]:
    """``n_views`` independently augmented views drawn sequentially from ``rng``."""
    if n_views < 1:
        raise ContractError(f"n_views must be positive, got {n_views}")
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3:
        raise ContractError(f"image must be (C, H, W), got {data.shape}")
    return [Tensor(apply_policy(data, policy, rng), dtype=np.float32) for _ in range(n_views)]


def view_batch(images: np.ndarray, policy: AugmentPolicy, rng: Rng, n_views: int = 2) -> np.ndarray:
    """Augment a stack of images into a view-major (n_views·B, C, h, w) array.

    Image ``i`` uses the stream ``rng.child(i)``, so results do not depend on
    how the batch is split across workers.
    """
    views = [[None] * len(images) for _ in range(n_views)]
    for i, img in enumerate(images):
        r = rng.child(i)
        for v in range(n_views):
            views[v][i] = apply_policy(img, policy, r)
    return np.stack([x for per_view in views for x in per_view])
