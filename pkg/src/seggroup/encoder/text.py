"""Miniature text transformer producing unit-norm sentence embeddings."""

from __future__ import annotations

import warnings

import torch
import torch.nn.functional as F
from torch import nn

from . import tokenizer
from .config import EncoderConfig
from .layers import Block, init_parameters


class TextEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, init_seed: int | None = None):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.token_embed = nn.Embedding(config.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.zeros(config.text_context_len, d))
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.ln_final = nn.LayerNorm(d)
        self.proj = nn.Linear(d, config.projection_dim, bias=False)
        init_parameters(self, config.seed if init_seed is None else init_seed)

    def encode_text(self, text: str) -> torch.Tensor:
        """Encode one string into a unit-norm (projection_dim,) embedding.

        Sequences longer than the context window are truncated with a warning.
        """
        ids, truncated = tokenizer.encode(text, self.config.vocab_size, self.config.text_context_len)
        if truncated:
            warnings.warn(
                f"text truncated to {self.config.text_context_len} tokens: {text[:60]!r}...",
                stacklevel=2,
            )
        idx = torch.tensor(ids, dtype=torch.long)
        x = self.token_embed(idx) + self.pos_embed[: len(ids)]
        for block in self.blocks:
            x, _, _ = block(x)
        pooled = self.ln_final(x)[len(ids) - 1]  # EOS position
        return F.normalize(self.proj(pooled), dim=-1)
