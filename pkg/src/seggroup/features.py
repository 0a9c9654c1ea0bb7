"""Patch-feature maps and their on-disk form.

A feature map is the dense per-patch representation of one image, either
produced by the built-in vision encoder or precomputed externally (e.g. by a
self-supervised backbone) and loaded from a tensor-container file.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TensorFormatError
from .tensorio import load_tensors, save_tensors
from .validation import check_finite_named


@dataclass
class PatchFeatureMap:
    features: np.ndarray          # (h, w, D)
    image_size: tuple[int, int]   # (H, W) pixels, exact multiples of the patch edge

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 3:
            raise TensorFormatError(
                f"features must be (h, w, D), got shape {self.features.shape}"
            )
        h, w, _ = self.features.shape
        H, W = self.image_size
        if h < 1 or w < 1:
            raise TensorFormatError("feature grid must be non-empty")
        if H % h != 0 or W % w != 0 or H // h != W // w:
            raise TensorFormatError(
                f"image size {H}x{W} is not an integer square-patch multiple of grid {h}x{w}"
            )
        check_finite_named(self.features, "features")

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[0], self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def patch_edge(self) -> int:
        return self.image_size[0] // self.features.shape[0]

    def flat(self) -> np.ndarray:
        """Patch vectors as an (h*w, D) matrix."""
        return self.features.reshape(-1, self.features.shape[2])


def save_features(path, fmap: PatchFeatureMap) -> None:
    save_tensors(
        path,
        {"features": np.ascontiguousarray(fmap.features)},
        metadata={"image_height": fmap.image_size[0], "image_width": fmap.image_size[1]},
    )


def load_external_features(path) -> PatchFeatureMap:
    """Load a feature map, validating shape metadata and finiteness."""
    tensors, metadata = load_tensors(path)
    if "features" not in tensors:
        raise TensorFormatError(f"{path!r}: missing 'features' tensor")
    features = tensors["features"]
    if features.ndim != 3:
        raise TensorFormatError(
            f"{path!r}: 'features' must be rank 3 (h, w, D), got shape {features.shape}"
        )
    if features.dtype not in (np.float32, np.float64):
        raise TensorFormatError(f"{path!r}: 'features' must be float32/float64, got {features.dtype}")
    try:
        size = (int(metadata["image_height"]), int(metadata["image_width"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise TensorFormatError(f"{path!r}: missing or invalid image size metadata") from exc
    return PatchFeatureMap(features=features, image_size=size)
