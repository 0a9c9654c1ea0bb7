"""Learnable region tokens and temperature: the only trainable state."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError, TensorFormatError
from ..tensorio import load_tensors, save_tensors

FORMAT_VERSION = 1
# CLIP-style temperature: logit_scale = log(1/tau), 1/tau starting at 14.3.
INITIAL_INV_TAU = 14.3
MAX_INV_TAU = 100.0


class RegionTokenBank(nn.Module):
    """One learnable token per codebook region id plus a learnable temperature.

    Tokens start at zero so an untrained bank is a no-op on the shared class
    token; ``logit_scale`` holds log(1/tau).
    """

    def __init__(self, num_regions: int, embed_dim: int):
        super().__init__()
        if num_regions < 2:
            raise ConfigError(f"token bank needs at least 2 regions, got {num_regions}")
        self.tokens = nn.Parameter(torch.zeros(num_regions, embed_dim))
        self.logit_scale = nn.Parameter(torch.tensor(math.log(INITIAL_INV_TAU)))

    @property
    def num_regions(self) -> int:
        return self.tokens.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.tokens.shape[1]

    def inv_tau(self) -> torch.Tensor:
        """exp(logit_scale), clamped to (0, 100]."""
        return self.logit_scale.exp().clamp(max=MAX_INV_TAU)


def save_token_bank(path, bank: RegionTokenBank, step: int = 0, extra: dict | None = None) -> None:
    meta = {"format_version": FORMAT_VERSION, "step": int(step)}
    if extra:
        meta.update(extra)
    save_tensors(
        path,
        {
            "tokens": bank.tokens.detach().cpu().numpy().astype(np.float32),
            "logit_scale": bank.logit_scale.detach().cpu().numpy().reshape(1).astype(np.float32),
        },
        metadata=meta,
    )


def load_token_bank(path) -> tuple[RegionTokenBank, int, dict]:
    tensors, meta = load_tensors(path)
    if meta.get("format_version") != FORMAT_VERSION:
        raise TensorFormatError(f"{path!r}: unsupported token bank version {meta.get('format_version')!r}")
    try:
        tokens = tensors["tokens"]
        logit_scale = tensors["logit_scale"]
    except KeyError as exc:
        raise TensorFormatError(f"{path!r}: missing tensor {exc}") from exc
    bank = RegionTokenBank(tokens.shape[0], tokens.shape[1])
    with torch.no_grad():
        bank.tokens.copy_(torch.from_numpy(tokens))
        bank.logit_scale.copy_(torch.from_numpy(logit_scale.reshape(())))
    return bank, int(meta.get("step", 0)), meta
