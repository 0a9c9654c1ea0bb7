"""Input validation helpers used by every public entry point.

All helpers either return a canonicalized value or raise one of the
exceptions from :mod:`seggroup.errors`.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ConfigError, DataError


def as_image_array(image) -> np.ndarray:
    """Canonicalize an image to a float32 (H, W, 3) array with finite entries.

    Accepts numpy arrays or torch tensors, channels-last. Integer input is
    assumed to be 8-bit and rescaled to [0, 1].
    """
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] not in (1, 3):
        raise DataError(f"expected (H, W, C) image with 1 or 3 channels, got shape {arr.shape}")
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise DataError("image contains non-finite pixel values")
    return arr


def check_multiple(size: tuple[int, int], patch_size: int) -> None:
    h, w = size
    if h % patch_size != 0 or w % patch_size != 0:
        raise DataError(
            f"image size {h}x{w} is not a multiple of patch size {patch_size}; pad the image first"
        )


def check_finite_named(array: np.ndarray, name: str) -> None:
    """Raise pointing at the first offending index if ``array`` has NaN/Inf."""
    mask = ~np.isfinite(array)
    if mask.any():
        idx = tuple(int(i) for i in np.argwhere(mask)[0])
        raise DataError(f"{name} contains non-finite value at index {idx}")


def check_vector_dim(vec, dim: int, name: str) -> None:
    n = vec.shape[-1]
    if n != dim:
        raise ConfigError(f"{name} has dimension {n}, expected {dim}")


def check_unit_norm(vec, tol: float = 1e-5, name: str = "embedding") -> None:
    if isinstance(vec, torch.Tensor):
        norm = float(torch.linalg.vector_norm(vec.detach().to(torch.float64)))
    else:
        norm = float(np.linalg.norm(np.asarray(vec, dtype=np.float64)))
    if abs(norm - 1.0) > tol:
        raise DataError(f"{name} is not unit-norm (|v| = {norm:.8f})")


def check_square_matrix(m, name: str = "matrix") -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"{name} must be square, got shape {tuple(m.shape)}")


def require_positive(value: int, name: str) -> None:
    if value < 1:
        raise ConfigError(f"{name} must be >= 1, got {value}")


def as_float_matrix(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    check_finite_named(arr, name)
    return arr


def seeded_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))
