"""Open-vocabulary recognition of grouped regions.

Category names are filled into prompt templates, encoded, and averaged into
one embedding per category; regions take the best-matching category by cosine
similarity, and the pixel label map is assembled from the high-resolution
masks. Datasets with an ambiguous background (VOC, COCO) route through an
auxiliary pool of categories: a region whose best match lies in the pool but
not in the dataset's own names is labeled background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DataError
from .grouping import RegionMaskSet

IGNORE_ID = 255
BACKGROUND_NAME = "background"
DEFAULT_TEMPLATES = (
    "a photo of a {}.",
    "a photo of the {}.",
    "an image of a {}.",
)


@dataclass
class CategorySet:
    """Dataset categories plus the prompt templates used to describe them."""

    names: list[str]
    templates: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    background_pool: list[str] | None = None

    def __post_init__(self):
        if not self.names:
            raise ConfigError("category set needs at least one name")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("category names must be unique")
        if any(not n.strip() for n in self.names):
            raise ConfigError("category names must be non-empty")
        if not self.templates:
            raise ConfigError("category set needs at least one template")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ConfigError(f"template {t!r} must contain exactly one {{}} placeholder")
        if len(self.names) > IGNORE_ID - 1:
            raise ConfigError(f"at most {IGNORE_ID - 1} categories supported")

    @property
    def has_background(self) -> bool:
        return self.background_pool is not None

    def pool_extras(self) -> list[str]:
        """Background-pool names that are not dataset names, order preserved."""
        if not self.background_pool:
            return []
        own = set(self.names)
        seen: set[str] = set()
        extras = []
        for name in self.background_pool:
            if name in own or name in seen:
                continue
            seen.add(name)
            extras.append(name)
        return extras

    def label_id(self, name_index: int) -> int:
        """LabelMap id for ``names[name_index]`` (background shifts ids by one)."""
        return name_index + 1 if self.has_background else name_index

    def legend(self) -> dict[int, str]:
        legend = {self.label_id(i): n for i, n in enumerate(self.names)}
        if self.has_background:
            legend[0] = BACKGROUND_NAME
        return legend

    @property
    def num_labels(self) -> int:
        return len(self.names) + (1 if self.has_background else 0)


@dataclass
class LabelMap:
    """Pixel labels plus the id -> name legend; 255 is the reserved ignore id."""

    labels: np.ndarray
    legend: dict[int, str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2 or not np.issubdtype(self.labels.dtype, np.integer):
            raise DataError("labels must be a 2-d integer grid")
        present = set(int(i) for i in np.unique(self.labels))
        missing = present - set(self.legend) - {IGNORE_ID}
        if missing:
            raise DataError(f"labels {sorted(missing)} missing from legend")


def load_category_file(path) -> tuple[list[str], list[str] | None]:
    """Read a category file: one name per line, optional ``# templates:`` block.

    Lines after a ``# templates:`` marker that still start with ``#`` are
    templates; other ``#`` lines are comments.
    """
    names: list[str] = []
    templates: list[str] = []
    in_templates = False
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.lower() == "templates:":
                    in_templates = True
                elif in_templates and body:
                    templates.append(body)
                continue
            in_templates = False
            names.append(line.strip())
    if not names:
        raise DataError(f"category file {path!r} lists no names")
    return names, (templates or None)


def embed_phrases(phrases: list[str], templates: list[str], text_encoder) -> torch.Tensor:
    """Per phrase: encode every filled template, average, re-normalize.

    Returns an (n, projection_dim) tensor, rows unit-norm, order preserved.
    """
    if not phrases:
        raise ConfigError("no phrases to embed")
    for t in templates:
        if t.count("{}") != 1:
            raise ConfigError(f"template {t!r} must contain exactly one {{}} placeholder")
    rows = []
    for phrase in phrases:
        embs = torch.stack([text_encoder.encode_text(t.replace("{}", phrase)) for t in templates])
        mean = embs.mean(dim=0)
        rows.append(mean / torch.linalg.vector_norm(mean))
    return torch.stack(rows)


def embed_categories(categories: CategorySet, text_encoder) -> torch.Tensor:
    """Embeddings for ``categories.names`` only (no background pool)."""
    return embed_phrases(categories.names, categories.templates, text_encoder)


@dataclass
class LabelSpace:
    """Joint embedding table over dataset names plus background-pool extras."""

    embeddings: torch.Tensor
    num_names: int
    combined_names: list[str]


def build_label_space(categories: CategorySet, text_encoder) -> LabelSpace:
    extras = categories.pool_extras()
    combined = list(categories.names) + extras
    return LabelSpace(
        embeddings=embed_phrases(combined, categories.templates, text_encoder),
        num_names=len(categories.names),
        combined_names=combined,
    )


def classify_regions(regions, cat_embs) -> list[tuple[int, int, float]]:
    """Assign each region the argmax-cosine category; ties to the lowest index.

    ``regions`` is a list of RegionEmbedding or a (K, D) tensor; returns
    ``(region_id, category_index, similarity)`` triples.
    """
    if isinstance(regions, (list, tuple)):
        if not regions:
            raise ConfigError("no regions to classify")
        ids = [r.region_id for r in regions]
        matrix = torch.stack([r.vector for r in regions])
    else:
        matrix = torch.as_tensor(regions)
        if matrix.ndim != 2 or matrix.shape[0] == 0:
            raise ConfigError("regions must be a non-empty (K, D) matrix")
        ids = list(range(matrix.shape[0]))
    cats = torch.as_tensor(cat_embs) if not isinstance(cat_embs, torch.Tensor) else cat_embs
    if cats.ndim != 2 or cats.shape[0] == 0:
        raise ConfigError("category embeddings must be a non-empty (N, D) matrix")
    if matrix.shape[1] != cats.shape[1]:
        raise ConfigError(
            f"region dim {matrix.shape[1]} does not match category dim {cats.shape[1]}"
        )
    sims = _cosine_table(matrix, cats).detach().cpu().numpy()
    out = []
    for row, rid in enumerate(ids):
        idx = int(np.argmax(sims[row]))  # first max = lowest index on ties
        out.append((rid, idx, float(sims[row, idx])))
    return out


def _cosine_table(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    an = a / torch.linalg.vector_norm(a, dim=1, keepdim=True).clamp_min(1e-30)
    bn = b / torch.linalg.vector_norm(b, dim=1, keepdim=True).clamp_min(1e-30)
    return an @ bn.T


def assemble_segmentation(
    masks: RegionMaskSet,
    region_labels: list[tuple[int, int, float]],
    categories: CategorySet,
) -> LabelMap:
    """Spread region labels over the high-resolution masks.

    ``region_labels`` holds classify_regions output over the joint label space
    (names first, pool extras after): an argmax falling in the pool labels the
    region background.
    """
    chosen: dict[int, int] = {}
    for rid, idx, _ in region_labels:
        if idx >= len(categories.names):
            if not categories.has_background:
                raise ConfigError("pool index present but category set has no background pool")
            chosen[rid] = 0
        else:
            chosen[rid] = categories.label_id(idx)

    missing = sorted(set(int(i) for i in np.unique(masks.high_res)) - set(chosen))
    if missing:
        raise DataError(f"region ids {missing} have no label")

    lut = np.full(max(chosen) + 1, IGNORE_ID, dtype=np.int64)
    for rid, label in chosen.items():
        lut[rid] = label
    labels = lut[masks.high_res]
    if labels.max() > IGNORE_ID:
        raise ConfigError("label ids exceed the 8-bit label range")
    return LabelMap(labels=labels.astype(np.uint8), legend=categories.legend())
