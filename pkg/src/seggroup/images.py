"""Image loading, sizing, and PNG export (label maps, masks, overlays)."""

from __future__ import annotations

import os
import tempfile

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError
from .recognition import IGNORE_ID, LabelMap


def load_image(path) -> np.ndarray:
    """PNG/JPEG -> float32 (H, W, 3) in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot read image {path!r}: {exc}") from exc


def load_label_png(path) -> np.ndarray:
    """Paletted or grayscale ground-truth PNG -> int32 id grid."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("P", "L"):
                img = img.convert("L")
            return np.asarray(img, dtype=np.int32)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot read label image {path!r}: {exc}") from exc


def resize_shorter(image: np.ndarray, shorter_side: int) -> np.ndarray:
    """Bilinear resize so the shorter side equals ``shorter_side`` (aspect kept)."""
    arr = np.asarray(image, dtype=np.float32)
    h, w = arr.shape[:2]
    if min(h, w) == shorter_side:
        return arr
    scale = shorter_side / min(h, w)
    new_h, new_w = max(1, round(h * scale)), max(1, round(w * scale))
    img = Image.fromarray((arr * 255.0).clip(0, 255).astype(np.uint8))
    return np.asarray(img.resize((new_w, new_h), Image.BILINEAR), dtype=np.float32) / 255.0


def pad_to_multiple(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Edge-pad bottom/right so both sides are patch multiples."""
    arr = np.asarray(image, dtype=np.float32)
    h, w = arr.shape[:2]
    pad_h = (-h) % patch_size
    pad_w = (-w) % patch_size
    if pad_h or pad_w:
        arr = np.pad(arr, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    return arr


def resize_and_pad(image: np.ndarray, patch_size: int, shorter_side: int | None = None) -> np.ndarray:
    """Optionally resize the shorter side, then pad to patch multiples.

    ``shorter_side=None`` keeps the original size (padding only), matching the
    keep-original-size inference mode.
    """
    arr = np.asarray(image, dtype=np.float32)
    if shorter_side is not None:
        arr = resize_shorter(arr, shorter_side)
    return pad_to_multiple(arr, patch_size)


def resize_labels_nearest(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of an id grid to (H, W)."""
    img = Image.fromarray(labels.astype(np.uint8), mode="L")
    out = img.resize((size[1], size[0]), Image.NEAREST)
    return np.asarray(out, dtype=labels.dtype)


def _atomic_save(img: Image.Image, path, **kwargs) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".png")
    os.close(fd)
    try:
        img.save(tmp, format="PNG", **kwargs)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_id_png(path, grid: np.ndarray) -> None:
    """Single-channel 8-bit PNG of small integer ids."""
    grid = np.asarray(grid)
    if grid.min() < 0 or grid.max() > 255:
        raise DataError("id grid does not fit in 8 bits")
    _atomic_save(Image.fromarray(grid.astype(np.uint8), mode="L"), path)


def color_table(n: int) -> np.ndarray:
    """Deterministic distinct colors for up to 256 ids (golden-angle hues)."""
    colors = np.zeros((max(n, 1), 3), dtype=np.uint8)
    for i in range(n):
        hue = (i * 0.61803398875) % 1.0
        value = 0.85 if i % 2 == 0 else 0.6
        colors[i] = _hsv_to_rgb(hue, 0.75, value)
    return colors


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return int(r * 255), int(g * 255), int(b * 255)


def save_label_map(path, label_map: LabelMap) -> None:
    """Paletted PNG: id -> deterministic color, ignore id black."""
    ids = sorted(set(label_map.legend) | {IGNORE_ID})
    palette = np.zeros((256, 3), dtype=np.uint8)
    table = color_table(len(ids))
    for slot, label_id in enumerate(ids):
        if label_id != IGNORE_ID:
            palette[label_id] = table[slot]
    img = Image.fromarray(label_map.labels.astype(np.uint8), mode="P")
    img.putpalette(palette.reshape(-1).tolist())
    _atomic_save(img)


def save_overlay(path, image: np.ndarray, label_map: LabelMap, alpha: float = 0.5) -> None:
    """Blend the label colors over the source image; output size equals input."""
    base = (np.asarray(image, dtype=np.float32) * 255.0).clip(0, 255)
    ids = sorted(set(label_map.legend) | {IGNORE_ID})
    table = color_table(len(ids))
    colors = np.zeros((256, 3), dtype=np.float32)
    for slot, label_id in enumerate(ids):
        if label_id != IGNORE_ID:
            colors[label_id] = table[slot]
    overlay = colors[label_map.labels]
    blended = ((1 - alpha) * base + alpha * overlay).round().astype(np.uint8)
    _atomic_save(Image.fromarray(blended, mode="RGB"))


def save_rgb(path, image: np.ndarray) -> None:
    arr = (np.asarray(image, dtype=np.float32) * 255.0).clip(0, 255).round().astype(np.uint8)
    _atomic_save(Image.fromarray(arr, mode="RGB"), path)
