"""Image decoding and dataset listings."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..augment import resize
from ..errors import DataError
from .manifest import ManifestRow, SampleManifest

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class CorruptImageError(DataError):
    pass


def load_image(uri, size: tuple[int, int] | None = None, root=None) -> np.ndarray:
    """Decode a PNG/JPEG into a float32 (3, H, W) array in [0, 1].

    With ``size`` the image is resized bilinearly (half-pixel centres, the
    same rule as the augmentation resampler).
    """
    path = Path(uri)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(f"cannot decode {path}: {exc}") from exc
    img = np.ascontiguousarray(arr.transpose(2, 0, 1))
    if size is not None and img.shape[1:] != tuple(size):
        img = resize(img.astype(np.float64), size).astype(np.float32)
    return img


def load_images(uris, size: tuple[int, int], root=None, workers: int = 1):
    """Decode many images, skipping unreadable ones.

    Returns ``(images, kept, skipped)`` where ``kept`` lists the positions in
    ``uris`` that loaded; output order always follows ``uris``.
    """
    uris = list(uris)

    def one(u):
        try:
            return load_image(u, size, root)
        except CorruptImageError as exc:
            log.warning("skipping image: %s", exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, uris))
    else:
        results = [one(u) for u in uris]
    kept = [i for i, r in enumerate(results) if r is not None]
    images = np.stack([results[i] for i in kept]) if kept else np.zeros((0, 3) + tuple(size), np.float32)
    return images, kept, len(uris) - len(kept)


def save_png(img: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def _category_from_path(parts: list[str]) -> tuple[str, str]:
    split = "train"
    if parts and parts[0] in ("train", "val", "test"):
        split, parts = parts[0], parts[1:]
    return "/".join(parts[:-1]), split


def read_listing(path, name: str | None = None, source_tag: str = "listing") -> SampleManifest:
    """Build an unmapped manifest from a directory tree or a listing file.

    Directory: every image file becomes a row; its category is the parent
    directory path (a leading ``train``/``val``/``test`` component sets the
    split). File: either a manifest, tab-separated ``uri, category[, split]``
    lines, or Places-style ``/a/category/file.jpg [index]`` lines.
    """
    path = Path(path)
    rows = []
    if path.is_dir():
        for dirpath, dirnames, filenames in os.walk(path):
            dirnames.sort()
            for fn in sorted(filenames):
                if Path(fn).suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                rel = Path(dirpath, fn).relative_to(path)
                category, split = _category_from_path(list(rel.parts))
                rows.append(ManifestRow(rel.as_posix(), category, None, split, source_tag))
    elif path.is_file():
        text = path.read_text(encoding="utf-8")
        if text.startswith("# dataset\t"):
            return SampleManifest.loads(text)
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" in line:
                parts = line.split("\t")
                if len(parts) not in (2, 3):
                    raise DataError(f"{path}:{lineno}: expected 'uri<TAB>category[<TAB>split]'")
                rows.append(ManifestRow(parts[0], parts[1], None, parts[2] if len(parts) == 3 else "train", source_tag))
            else:
                uri = line.split()[0]
                category, split = _category_from_path([p for p in uri.split("/") if p])
                rows.append(ManifestRow(uri, category, None, split, source_tag))
    else:
        raise DataError(f"listing {path} does not exist")
    if not rows:
        raise DataError(f"listing {path} contains no images")
    return SampleManifest(name or path.stem, rows, {"source": str(path)})
