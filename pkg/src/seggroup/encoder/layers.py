"""Transformer building blocks with a split patch/query token stream.

Patch tokens and query (class) tokens share every weight but are carried in
separate tensors: query tokens read from patch keys and are never keys or
values for the patch stream. This makes the patch stream bitwise independent
of how many query tokens are attached, which the masking strategies rely on.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Multi-head attention core. Shapes: q (H, Nq, dh), k/v (H, Nk, dh).

    ``bias`` is an additive (Nq, Nk) mask of 0 / -inf, broadcast over heads.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.matmul(q, k.transpose(-1, -2)) * scale
    if bias is not None:
        scores = scores + bias
    weights = torch.softmax(scores, dim=-1)
    return torch.matmul(weights, v)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def split(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        n = x.shape[0]
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        heads = lambda t: t.view(n, self.num_heads, self.head_dim).transpose(0, 1)
        return heads(q), heads(k), heads(v)

    def merge(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x.transpose(0, 1).reshape(x.shape[1], -1))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block applied to all token streams with one set of weights."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(
        self,
        patch_x: torch.Tensor,
        query_x: torch.Tensor | None = None,
        patch_bias: torch.Tensor | None = None,
        query_bias: torch.Tensor | None = None,
        prompt_x: torch.Tensor | None = None,
        prompt_bias: torch.Tensor | None = None,
    ):
        h_p = self.norm1(patch_x)
        q_p, k_p, v_p = self.attn.split(h_p)
        patch_attn = self.attn.merge(attend(q_p, k_p, v_p, patch_bias))

        # Prompt tokens (concat mode) are spectators like class tokens: they
        # query masked patches and only serve as keys for their own class token.
        prompt_attn = None
        k_full, v_full = k_p, v_p
        if prompt_x is not None:
            h_r = self.norm1(prompt_x)
            q_r, k_r, v_r = self.attn.split(h_r)
            prompt_attn = self.attn.merge(attend(q_r, k_p, v_p, prompt_bias))
            k_full = torch.cat([k_p, k_r], dim=1)
            v_full = torch.cat([v_p, v_r], dim=1)

        query_attn = None
        if query_x is not None:
            h_q = self.norm1(query_x)
            q_q = self.attn.split(h_q)[0]
            query_attn = self.attn.merge(attend(q_q, k_full, v_full, query_bias))

        patch_x = patch_x + patch_attn
        patch_x = patch_x + self.mlp(self.norm2(patch_x))
        if prompt_x is not None:
            prompt_x = prompt_x + prompt_attn
            prompt_x = prompt_x + self.mlp(self.norm2(prompt_x))
        if query_x is not None:
            query_x = query_x + query_attn
            query_x = query_x + self.mlp(self.norm2(query_x))
        return patch_x, query_x, prompt_x


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically initialize every parameter from a seeded generator.

    Parameters are filled in registration order, so identical architectures
    built with identical seeds carry bit-identical weights.
    """
    ln_names = set()
    for mod_name, sub in module.named_modules():
        if isinstance(sub, nn.LayerNorm):
            ln_names.add(f"{mod_name}.weight" if mod_name else "weight")
            ln_names.add(f"{mod_name}.bias" if mod_name else "bias")

    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name in ln_names:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                param.copy_(torch.empty_like(param).normal_(mean=0.0, std=0.02, generator=gen))
