"""Synthetic desk-scale corpus: colored shapes on textured backgrounds.

Captions deliberately name only a strict subset of the rendered objects, so
every caption noun has a region while some regions have no noun. That is the
asymmetry the one-way assignment is built for, and it holds by construction.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ConfigError
from .images import save_id_png, save_rgb
from .validation import seeded_generator

# (name, base RGB, shape); gt id = position + 1, background = 0
OBJECTS = (
    ("tomato", (200, 30, 30), "circle"),
    ("lemon", (235, 220, 50), "circle"),
    ("ball", (30, 60, 215), "circle"),
    ("leaf", (40, 180, 70), "triangle"),
    ("cone", (245, 130, 20), "triangle"),
    ("plum", (130, 40, 170), "circle"),
    ("box", (120, 75, 35), "square"),
    ("candy", (240, 100, 180), "square"),
)

BACKGROUNDS = (
    ("grass", (60, 110, 45)),
    ("sand", (210, 190, 150)),
    ("wall", (150, 150, 155)),
    ("sea", (25, 80, 120)),
)

STOPWORDS = (
    "a", "an", "the", "and", "of", "with", "in", "on", "is", "are",
    "there", "photo", "image", "scene", "next", "to", "near", "beside",
)

CAPTION_SHELLS = (
    "a photo of {}.",
    "an image with {} in the scene.",
    "there is {} near the middle.",
)


def object_names() -> list[str]:
    return [name for name, _, _ in OBJECTS]


def background_names() -> list[str]:
    return [name for name, _ in BACKGROUNDS]


def _shape_mask(shape: str, size: tuple[int, int], cy: float, cx: float, r: float) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if shape == "triangle":
        inside = (yy >= cy - r) & (yy <= cy + r)
        halfwidth = (yy - (cy - r)) * 0.5
        return inside & (np.abs(xx - cx) <= halfwidth)
    raise ConfigError(f"unknown shape {shape!r}")


def _textured(base: tuple[int, int, int], size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = size
    coarse = rng.normal(0.0, 10.0, size=(max(h // 8, 1), max(w // 8, 1), 3))
    reps = (int(np.ceil(h / coarse.shape[0])), int(np.ceil(w / coarse.shape[1])))
    noise = np.kron(coarse, np.ones((reps[0], reps[1], 1)))[:h, :w]
    return np.asarray(base, dtype=np.float64) + noise + rng.normal(0.0, 3.0, size=(h, w, 3))


def render_image(rng: np.random.Generator, size: tuple[int, int] = (96, 96),
                 min_objects: int = 2, max_objects: int = 4):
    """One scene: image in [0,1], gt id grid, placed object names, texture name."""
    if min_objects < 2:
        raise ConfigError("asymmetric captions require at least 2 objects per image")
    h, w = size
    bg_idx = int(rng.integers(len(BACKGROUNDS)))
    bg_name, bg_rgb = BACKGROUNDS[bg_idx]
    canvas = _textured(bg_rgb, size, rng)
    gt = np.zeros(size, dtype=np.int32)

    count = int(rng.integers(min_objects, max_objects + 1))
    picks = rng.choice(len(OBJECTS), size=count, replace=False)
    placed: list[str] = []
    taken: list[tuple[float, float, float]] = []
    r_lo, r_hi = max(6.0, min(h, w) / 7.0), min(h, w) / 4.5
    for obj_idx in picks:
        name, rgb, shape = OBJECTS[int(obj_idx)]
        for _ in range(40):
            r = float(rng.uniform(r_lo, r_hi))
            cy = float(rng.uniform(r + 1, h - r - 1))
            cx = float(rng.uniform(r + 1, w - r - 1))
            if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 3) ** 2 for py, px, pr in taken):
                mask = _shape_mask(shape, size, cy, cx, r)
                jitter = rng.normal(0.0, 6.0, size=(h, w, 3))
                canvas = np.where(mask[..., None], np.asarray(rgb, dtype=np.float64) + jitter, canvas)
                gt[mask] = int(obj_idx) + 1
                taken.append((cy, cx, r))
                placed.append(name)
                break
    if len(placed) < 2:
        # crowded layout; retry with fresh randomness from the same stream
        return render_image(rng, size, min_objects, max_objects)
    image = np.clip(canvas, 0.0, 255.0) / 255.0
    return image.astype(np.float32), gt, placed, bg_name


def make_caption(rng: np.random.Generator, placed: list[str]) -> tuple[str, list[str]]:
    """Caption naming a strict, non-empty subset of the placed objects."""
    k = int(rng.integers(1, len(placed)))
    chosen = [placed[i] for i in rng.choice(len(placed), size=k, replace=False)]
    phrases = [f"a {name}" for name in chosen]
    if len(phrases) == 1:
        listing = phrases[0]
    else:
        listing = ", ".join(phrases[:-1]) + " and " + phrases[-1]
    shell = CAPTION_SHELLS[int(rng.integers(len(CAPTION_SHELLS)))]
    return shell.format(listing), chosen


def synthesize_corpus(out_dir, num_images: int, size: tuple[int, int] = (96, 96),
                      seed: int = 0) -> dict:
    """Write images/, gt/, captions.jsonl, and the category/lexicon files.

    Byte-identical for identical (num_images, size, seed).
    """
    rng = seeded_generator(seed)
    out_dir = os.fspath(out_dir)
    images_dir = os.path.join(out_dir, "images")
    gt_dir = os.path.join(out_dir, "gt")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(gt_dir, exist_ok=True)

    entries = []
    records = []
    for i in range(num_images):
        image, gt, placed, bg_name = render_image(rng, size)
        caption, nouns = make_caption(rng, placed)
        stem = f"{i:05d}"
        save_rgb(os.path.join(images_dir, stem + ".png"), image)
        save_id_png(os.path.join(gt_dir, stem + ".png"), gt)
        record = {"image": f"images/{stem}.png", "caption": caption}
        if i % 2 == 0:
            record["nouns"] = nouns  # odd records exercise the lexicon extractor
        records.append(record)
        entries.append({
            "image": record["image"],
            "gt": f"gt/{stem}.png",
            "objects": placed,
            "background": bg_name,
            "caption_nouns": nouns,
        })

    with open(os.path.join(out_dir, "captions.jsonl"), "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    _write_lines(os.path.join(out_dir, "categories.txt"), object_names())
    _write_lines(os.path.join(out_dir, "background_pool.txt"), background_names())
    _write_lines(os.path.join(out_dir, "lexicon.txt"), object_names() + background_names())
    _write_lines(os.path.join(out_dir, "stopwords.txt"), list(STOPWORDS))

    manifest = {
        "seed": seed,
        "num_images": num_images,
        "image_size": list(size),
        "objects": object_names(),
        "backgrounds": background_names(),
        "entries": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
