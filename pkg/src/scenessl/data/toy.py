"""Procedural stand-in datasets for desk-scale runs.

Each toy scene class owns a disjoint slice of stripe orientation and of wall
hue, plus its own stripe frequency band and furniture count, so classes are
separable by construction while single images still vary. ``style="render"``
produces flat, noise-free shading for use as a synthetic pretext source.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractError
from ..numerics import Rng
from .images import save_png
from .manifest import ManifestRow, SampleManifest
from .remap import PLACES8_CLASSES, PLACES8_SOURCES
from .splits import stratified_split


@dataclass(frozen=True)
class ToySceneSpec:
    classes: int = 8
    image_size: int = 64
    per_class: int = 120
    seed: int = 0
    class_names: tuple[str, ...] | None = None
    source_tag: str = "toy-real"
    synthetic: bool = False
    style: str = "photo"
    noise: float = 0.04
    test_fraction: float = 0.2
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.classes < 2:
            raise ContractError("need at least two classes")
        if self.image_size < 8 or self.image_size % 4:
            raise ContractError(f"image_size must be a multiple of 4 and >= 8, got {self.image_size}")
        if self.per_class < 1:
            raise ContractError("per_class must be positive")
        if self.style not in ("photo", "render"):
            raise ContractError(f"style must be 'photo' or 'render', got {self.style!r}")
        if self.class_names is not None and len(self.class_names) != self.classes:
            raise ContractError(f"{len(self.class_names)} class names for {self.classes} classes")
        if self.test_fraction < 0 or self.val_fraction < 0 or self.test_fraction + self.val_fraction >= 1:
            raise ContractError("test_fraction + val_fraction must lie in [0, 1)")

    @property
    def names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            return tuple(self.class_names)
        if self.classes == len(PLACES8_CLASSES):
            return PLACES8_CLASSES
        return tuple(f"class{c}" for c in range(self.classes))

    def class_params(self, c: int) -> dict:
        """Parameter ranges for class ``c``; orientation and hue ranges are disjoint across classes."""
        C = self.classes
        return {
            "angle": (c * math.pi / C, (c + 0.7) * math.pi / C),
            "hue": (c / C, (c + 0.6) / C),
            "frequency": (3.0 + 2.0 * (c % 3), 4.0 + 2.0 * (c % 3)),
            "boxes": 1 + c % 4,
        }


@dataclass
class ToyDataset:
    """Images kept in memory alongside their manifest.

    ``images[i]`` belongs to ``manifest.rows[i]``; pixel values are already
    quantised to 8 bits so they equal what a PNG round trip would give.
    """

    manifest: SampleManifest
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    root: Path | None = None
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {r.uri: i for i, r in enumerate(self.manifest.rows)}

    def rows_for(self, manifest: SampleManifest) -> np.ndarray:
        return np.array([self.index[r.uri] for r in manifest.rows], dtype=np.int64)

    def take(self, uris) -> np.ndarray:
        return self.images[[self.index[u] for u in uris]]


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name.replace("'", "").lower()).strip("_")


def _rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _draw_scene(spec: ToySceneSpec, c: int, rng: Rng) -> np.ndarray:
    n = spec.image_size
    p = spec.class_params(c)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n
    theta = rng.uniform(*p["angle"])
    freq = rng.uniform(*p["frequency"])
    phase = rng.uniform(0, 2 * math.pi)
    hue = rng.uniform(*p["hue"])
    wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    if spec.style == "render":
        wave = np.sign(wave)
    wall = _rgb(hue, 0.55, 0.75)[:, None, None] * (0.8 + 0.2 * wave)[None]
    floor_y = rng.uniform(0.6, 0.8)
    floor = _rgb(hue + 0.5, 0.3, 0.45)[:, None, None] * (0.9 + 0.1 * np.cos(12 * math.pi * xx))[None]
    img = np.where((yy >= floor_y)[None], floor, wall)
    for _ in range(p["boxes"]):
        w, h = rng.uniform(0.1, 0.25), rng.uniform(0.1, 0.3)
        x0 = rng.uniform(0, 1 - w)
        y1 = floor_y + rng.uniform(-0.02, 0.05)
        box = (xx >= x0) & (xx < x0 + w) & (yy >= y1 - h) & (yy < y1)
        img = np.where(box[None], _rgb(hue + 0.25, 0.7, rng.uniform(0.3, 0.9))[:, None, None], img)
    if spec.style == "photo":
        img = img * (0.85 + 0.3 * rng.uniform())
        img = img + spec.noise * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def _finish(spec: ToySceneSpec, rows, images, labels, names, root, rng: Rng, name: str) -> ToyDataset:
    header = {"seed": str(spec.seed), "source": spec.source_tag}
    manifest = SampleManifest(name, rows, header)
    if spec.test_fraction > 0:
        manifest = stratified_split(manifest, spec.test_fraction, rng.child("test"), target="test")
    if spec.val_fraction > 0:
        manifest = stratified_split(manifest, spec.val_fraction / (1 - spec.test_fraction), rng.child("val"), target="val")
    images = np.stack(images)
    if root is not None:
        root = Path(root)
        for row, img in zip(manifest.rows, images):
            save_png(img, root / row.uri)
        manifest.write(root / "manifest.tsv")
    return ToyDataset(manifest, images, np.asarray(labels, dtype=np.int64), names, root)


def generate_toy_scenes(spec: ToySceneSpec, root=None) -> ToyDataset:
    """Render ``classes × per_class`` scenes, split them, optionally write PNGs.

    The original category of each row cycles through the real category
    names that map to its class when the Places8 class list is in use. With
    ``root`` the images are written in a Places-style tree,
    ``root/<letter>/<category>/<source>-<class>-<index>.png``, next to a
    ``manifest.tsv``; uris are relative to ``root``.
    """
    rng = Rng(spec.seed).child("toy", spec.source_tag)
    names = spec.names
    rows, images, labels = [], [], []
    for c, cls in enumerate(names):
        origins = PLACES8_SOURCES.get(cls, (cls,))
        stream = rng.child("class", c)
        for i in range(spec.per_class):
            images.append(_quantize(_draw_scene(spec, c, stream.child(i))))
            labels.append(c)
            origin = origins[i % len(origins)]
            slug = _slug(origin)
            uri = f"{slug[0]}/{slug}/{spec.source_tag}-{c}-{i:05d}.png"
            rows.append(ManifestRow(uri, origin, cls, "none", spec.source_tag, spec.synthetic))
    return _finish(spec, rows, images, labels, names, root, rng, f"toy-scenes.{spec.source_tag}")


OBJECT_SHAPES = ("disc", "square", "triangle", "cross", "ring", "bar")


def _draw_object(shape: str, n: int, rng: Rng) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n
    cx, cy = rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65)
    r = rng.uniform(0.15, 0.3)
    dx, dy = xx - cx, yy - cy
    if shape == "disc":
        mask = dx**2 + dy**2 < r**2
    elif shape == "square":
        mask = (abs(dx) < r * 0.8) & (abs(dy) < r * 0.8)
    elif shape == "triangle":
        mask = (dy < r * 0.7) & (dy > -r) & (abs(dx) < (dy + r) * 0.6)
    elif shape == "cross":
        mask = ((abs(dx) < r * 0.25) | (abs(dy) < r * 0.25)) & (abs(dx) < r) & (abs(dy) < r)
    elif shape == "ring":
        d = dx**2 + dy**2
        mask = (d < r**2) & (d > (0.6 * r) ** 2)
    else:
        mask = (abs(dx) < r) & (abs(dy) < r * 0.2)
    bg = _rgb(rng.uniform(), rng.uniform(0, 0.3), rng.uniform(0.6, 1.0))
    fg = _rgb(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.2, 0.8))
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    return np.clip(img + 0.03 * rng.normal(size=img.shape), 0.0, 1.0)


def generate_toy_objects(per_class: int = 60, image_size: int = 64, seed: int = 0, root=None) -> ToyDataset:
    """Centred single-object images, a stand-in for an object-centric pretext pool."""
    spec = ToySceneSpec(classes=len(OBJECT_SHAPES), image_size=image_size, per_class=per_class, seed=seed,
                        class_names=OBJECT_SHAPES, source_tag="toy-objects", test_fraction=0.0, val_fraction=0.0)
    rng = Rng(seed).child("toy", "objects")
    rows, images, labels = [], [], []
    for c, shape in enumerate(OBJECT_SHAPES):
        stream = rng.child("class", c)
        for i in range(per_class):
            images.append(_quantize(_draw_object(shape, image_size, stream.child(i))))
            labels.append(c)
            rows.append(ManifestRow(f"toy-objects/{shape}/{i:05d}.png", shape, shape, "train", "toy-objects"))
    return _finish(spec, rows, images, labels, spec.names, root, rng, "toy-objects")


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Plain accuracy of a nearest-class-mean rule on flattened pixels."""
    train_x = np.asarray(train_x, np.float64).reshape(len(train_x), -1)
    test_x = np.asarray(test_x, np.float64).reshape(len(test_x), -1)
    classes = np.unique(train_y)
    centroids = np.stack([train_x[train_y == c].mean(0) for c in classes])
    d = ((test_x[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float(np.mean(classes[d.argmin(1)] == np.asarray(test_y)))
