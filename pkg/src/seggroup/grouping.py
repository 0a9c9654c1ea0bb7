"""Spatially-consistent grouping.

Patch features are clustered into M regions. In codebook mode a corpus-level
centroid set keeps region ids consistent across images (the stand-in for a
distilled self-supervised backbone's clusters); per-image mode falls back to
plain k-means with size-ranked ids and no cross-image semantics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConfigError, DataError, TensorFormatError
from .features import PatchFeatureMap
from .tensorio import load_tensors, save_tensors
from .validation import check_finite_named, seeded_generator

METRICS = ("cosine", "euclidean")
DEFAULT_REGIONS = 27
SHIFT_TOL = 1e-6
MAX_ITER = 300


# --------------------------------------------------------------------- types


@dataclass
class Codebook:
    """Corpus-level centroids giving regions consistent ids across images."""

    centroids: np.ndarray
    metric: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ConfigError(f"codebook needs an (M >= 2, D) centroid matrix, got {self.centroids.shape}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; choose from {METRICS}")
        check_finite_named(self.centroids, "centroids")
        if self.metric == "cosine":
            norms = np.linalg.norm(self.centroids, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ConfigError("cosine codebook centroids must be unit-norm")

    @property
    def num_regions(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class RegionMaskSet:
    """Patch-grid and pixel-grid region assignments for one image.

    Both grids are partitions by construction: every cell holds exactly one
    region id.
    """

    low_res: np.ndarray    # (h, w) int
    high_res: np.ndarray   # (H, W) int
    present_ids: frozenset[int] = field(init=False)

    def __post_init__(self):
        self.low_res = np.asarray(self.low_res)
        self.high_res = np.asarray(self.high_res)
        for name, grid in (("low_res", self.low_res), ("high_res", self.high_res)):
            if grid.ndim != 2 or not np.issubdtype(grid.dtype, np.integer):
                raise DataError(f"{name} must be a 2-d integer grid")
            if grid.size and grid.min() < 0:
                raise DataError(f"{name} contains negative region ids")
        h, w = self.low_res.shape
        H, W = self.high_res.shape
        if H % h != 0 or W % w != 0 or H // h != W // w:
            raise DataError(
                f"high-res grid {H}x{W} is not a square-patch multiple of low-res grid {h}x{w}"
            )
        self.present_ids = frozenset(int(i) for i in np.unique(self.low_res))

    @property
    def image_size(self) -> tuple[int, int]:
        return self.high_res.shape

    def region_pixel_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.high_res, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def check_partition(self) -> None:
        """Exact integer check that per-id boolean masks are disjoint and cover."""
        for grid in (self.low_res, self.high_res):
            masks = [grid == rid for rid in np.unique(grid)]
            total = np.zeros(grid.shape, dtype=np.int64)
            for m in masks:
                total += m.astype(np.int64)
            if not (total == 1).all():
                raise DataError("region masks are not a partition")


def majority_downsample(high_res: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Majority-vote pooling of a pixel grid onto a patch grid, ties to lowest id."""
    h, w = grid
    H, W = high_res.shape
    ph, pw = H // h, W // w
    blocks = high_res.reshape(h, ph, w, pw).transpose(0, 2, 1, 3).reshape(h, w, ph * pw)
    out = np.empty((h, w), dtype=high_res.dtype)
    for i in range(h):
        for j in range(w):
            out[i, j] = np.bincount(blocks[i, j]).argmax()
    return out


# ----------------------------------------------------------------- k-means


def _canonical(X: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        norms = np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-30)
        return X / norms
    return X


def _distances(X: np.ndarray, centroids: np.ndarray, metric: str) -> np.ndarray:
    """(n, M) distance table; X must already be canonical for the metric."""
    if metric == "cosine":
        return 1.0 - X @ centroids.T
    sq = np.sum(X**2, axis=1)[:, None] - 2.0 * X @ centroids.T + np.sum(centroids**2, axis=1)[None, :]
    return np.maximum(sq, 0.0)


def _assign(X: np.ndarray, centroids: np.ndarray, metric: str) -> np.ndarray:
    return np.argmin(_distances(X, centroids, metric), axis=1)


def _sse(X: np.ndarray, centroids: np.ndarray, labels: np.ndarray, metric: str) -> float:
    d = _distances(X, centroids, metric)
    return float(d[np.arange(len(X)), labels].sum())


def _update(X: np.ndarray, labels: np.ndarray, centroids: np.ndarray, metric: str) -> np.ndarray:
    new = centroids.copy()
    for k in range(centroids.shape[0]):
        members = X[labels == k]
        if len(members) == 0:
            continue  # empty cluster keeps its centroid
        mean = members.mean(axis=0)
        if metric == "cosine":
            norm = np.linalg.norm(mean)
            if norm < 1e-30:
                continue
            mean = mean / norm
        new[k] = mean
    return new


def _plusplus_init(X: np.ndarray, m: int, rng: np.random.Generator, metric: str) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    dist = _distances(X, X[chosen[-1]][None, :], metric)[:, 0]
    while len(chosen) < m:
        total = dist.sum()
        if total <= 0.0:
            # all remaining mass on duplicates; take the first unchosen point
            remaining = [i for i in range(n) if i not in chosen]
            chosen.append(remaining[0])
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(dist), r, side="right"))
            idx = min(idx, n - 1)
            chosen.append(idx)
        dist = np.minimum(dist, _distances(X, X[chosen[-1]][None, :], metric)[:, 0])
    return X[chosen].copy()


@dataclass
class LloydResult:
    centroids: np.ndarray
    labels: np.ndarray
    sse_path: list[float]
    n_iter: int


def lloyd_kmeans(
    X: np.ndarray,
    m: int,
    seed: int = 0,
    metric: str = "cosine",
    tol: float = SHIFT_TOL,
    max_iter: int = MAX_ITER,
) -> LloydResult:
    """Seeded k-means++ plus Lloyd's iterations.

    Runs until the largest centroid shift drops below ``tol`` or ``max_iter``
    update steps; the recorded SSE path is non-increasing.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < m:
        raise DataError(f"need at least {m} points for {m} clusters, got shape {X.shape}")
    X = _canonical(X, metric)
    rng = seeded_generator(seed)
    centroids = _plusplus_init(X, m, rng, metric)

    labels = _assign(X, centroids, metric)
    sse_path = [_sse(X, centroids, labels, metric)]
    n_iter = 0
    for _ in range(max_iter):
        n_iter += 1
        new_centroids = _update(X, labels, centroids, metric)
        shift = float(np.linalg.norm(new_centroids - centroids, axis=1).max())
        centroids = new_centroids
        labels = _assign(X, centroids, metric)
        sse_path.append(_sse(X, centroids, labels, metric))
        if shift < tol:
            break
    return LloydResult(centroids=centroids, labels=labels, sse_path=sse_path, n_iter=n_iter)


class CosineKMeans(ClusterMixin, BaseEstimator):
    """Seeded Lloyd's k-means under a cosine or euclidean metric.

    Deterministic for a fixed ``random_state``; exposes the per-iteration SSE
    trace as ``sse_path_``.
    """

    def __init__(self, n_clusters=DEFAULT_REGIONS, metric="cosine", random_state=0,
                 tol=SHIFT_TOL, max_iter=MAX_ITER):
        self.n_clusters = n_clusters
        self.metric = metric
        self.random_state = random_state
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        result = lloyd_kmeans(
            X, self.n_clusters, seed=self.random_state, metric=self.metric,
            tol=self.tol, max_iter=self.max_iter,
        )
        self.cluster_centers_ = result.centroids
        self.labels_ = result.labels
        self.inertia_ = result.sse_path[-1]
        self.sse_path_ = result.sse_path
        self.n_iter_ = result.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return _assign(_canonical(X, self.metric), self.cluster_centers_, self.metric)


# --------------------------------------------------------------- operations


def _corpus_matrix(feature_maps) -> np.ndarray:
    rows = []
    for item in feature_maps:
        if isinstance(item, PatchFeatureMap):
            rows.append(item.flat())
        else:
            arr = np.asarray(item, dtype=np.float64)
            rows.append(arr.reshape(-1, arr.shape[-1]))
    if not rows:
        raise DataError("empty feature corpus")
    dims = {r.shape[1] for r in rows}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dimensions in corpus: {sorted(dims)}")
    return np.concatenate(rows, axis=0)


def fit_codebook(feature_maps, num_regions: int = DEFAULT_REGIONS, seed: int = 0,
                 metric: str = "cosine") -> Codebook:
    """Fit the corpus-level centroid codebook over all patch vectors."""
    X = _corpus_matrix(feature_maps)
    distinct = np.unique(_canonical(X.astype(np.float64), metric), axis=0).shape[0]
    if distinct < num_regions:
        raise DataError(
            f"corpus has only {distinct} distinct patch vectors, fewer than {num_regions} regions"
        )
    result = lloyd_kmeans(X, num_regions, seed=seed, metric=metric)
    return Codebook(centroids=result.centroids, metric=metric, seed=seed)


def cluster_image(fmap: PatchFeatureMap, codebook: Codebook) -> np.ndarray:
    """Assign each patch to its nearest centroid; ties go to the lowest id."""
    if fmap.dim != codebook.dim:
        raise DataError(
            f"feature dim {fmap.dim} does not match codebook dim {codebook.dim}"
        )
    X = _canonical(fmap.flat().astype(np.float64), codebook.metric)
    labels = _assign(X, codebook.centroids, codebook.metric)
    h, w = fmap.grid
    return labels.reshape(h, w).astype(np.int32)


def upsample_masks(
    fmap: PatchFeatureMap,
    low_res: np.ndarray,
    codebook: Codebook | None = None,
    image_size: tuple[int, int] | None = None,
    mode: str = "bilinear",
) -> RegionMaskSet:
    """Build the pixel-resolution mask grid to pair with ``low_res``.

    ``bilinear`` interpolates the feature map to pixel resolution and assigns
    every pixel to its nearest centroid; ``replicate`` repeats each patch id
    over its pixel block (cheap mode, no codebook needed).
    """
    low_res = np.asarray(low_res)
    if low_res.shape != fmap.grid:
        raise DataError(f"low_res shape {low_res.shape} does not match feature grid {fmap.grid}")
    size = tuple(image_size) if image_size is not None else fmap.image_size
    h, w = fmap.grid
    H, W = size
    if H % h != 0 or W % w != 0:
        raise DataError(f"image size {size} is not a multiple of the patch grid {fmap.grid}")

    if mode == "replicate":
        high = np.repeat(np.repeat(low_res, H // h, axis=0), W // w, axis=1)
        return RegionMaskSet(low_res=low_res, high_res=high.astype(np.int32))
    if mode != "bilinear":
        raise ConfigError(f"unknown upsample mode {mode!r}")
    if codebook is None:
        raise ConfigError("bilinear upsampling requires a codebook")

    feats = torch.from_numpy(np.ascontiguousarray(fmap.features, dtype=np.float64))
    dense = F.interpolate(
        feats.permute(2, 0, 1)[None], size=(H, W), mode="bilinear", align_corners=False
    )[0].permute(1, 2, 0).numpy()
    X = _canonical(dense.reshape(-1, fmap.dim), codebook.metric)
    # pixels choose among the regions of this image only, so high_res stays a
    # counterpart of low_res (same region set, no phantom ids)
    present = np.unique(low_res)
    if present.max() >= codebook.num_regions:
        raise DataError("low_res contains ids outside the codebook")
    local = _assign(X, codebook.centroids[present], codebook.metric)
    high = present[local].reshape(H, W).astype(np.int32)
    return RegionMaskSet(low_res=low_res, high_res=high)


def per_image_kmeans(fmap: PatchFeatureMap, num_regions: int, seed: int = 0,
                     metric: str = "cosine") -> np.ndarray:
    """Plain per-image clustering; ids are size ranks (largest region = 0).

    Cross-image id consistency does not hold in this mode, so learnable region
    tokens are unavailable downstream.
    """
    X = fmap.flat().astype(np.float64)
    distinct = np.unique(_canonical(X, metric), axis=0).shape[0]
    m = num_regions
    if distinct < m:
        warnings.warn(
            f"only {distinct} distinct patch vectors; reducing clusters from {m} to {distinct}",
            stacklevel=2,
        )
        m = distinct
    result = lloyd_kmeans(X, m, seed=seed, metric=metric)
    sizes = np.bincount(result.labels, minlength=m)
    order = np.argsort(-sizes, kind="stable")  # ties keep ascending original id
    rank_of = np.empty(m, dtype=np.int64)
    rank_of[order] = np.arange(m)
    h, w = fmap.grid
    return rank_of[result.labels].reshape(h, w).astype(np.int32)


# -------------------------------------------------------------- persistence


def save_codebook(path, codebook: Codebook) -> None:
    save_tensors(
        path,
        {"centroids": codebook.centroids},
        metadata={"num_regions": codebook.num_regions, "metric": codebook.metric, "seed": codebook.seed},
    )


def load_codebook(path) -> Codebook:
    tensors, meta = load_tensors(path)
    if "centroids" not in tensors:
        raise TensorFormatError(f"{path!r}: missing 'centroids' tensor")
    return Codebook(
        centroids=tensors["centroids"],
        metric=str(meta.get("metric", "cosine")),
        seed=int(meta.get("seed", 0)),
    )
