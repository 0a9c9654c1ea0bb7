"""Vision transformer with region-masked class-token readout.

Three ways to turn region masks into region embeddings:

* ``pixel_mask``   - overwrite out-of-region pixels with the fill color and run
                     one full forward pass per region.
* ``token_mask``   - one pass; patch attention is block-diagonal by region and
                     each region's class token reads only its own patches.
* ``context_aware``- one pass; patches attend to all patches exactly as in
                     whole-image encoding, while each region's class token
                     reads only the patches inside its mask. Class tokens are
                     query-only spectators: never keys, never visible to each
                     other or to patches.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError, DataError
from ..features import PatchFeatureMap
from ..validation import as_image_array, check_multiple
from .bank import RegionTokenBank
from .config import EncoderConfig
from .layers import Block, init_parameters

STRATEGIES = ("pixel_mask", "token_mask", "context_aware")


@dataclass
class RegionEmbedding:
    """Unit-norm embedding of one grouped region."""

    vector: torch.Tensor
    region_id: int


class VisionEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, init_seed: int | None = None):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.patch_size, stride=config.patch_size)
        self.pos_grid = nn.Parameter(torch.zeros(config.pos_grid_size, config.pos_grid_size, d))
        self.class_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.ln_final = nn.LayerNorm(d)
        self.proj = nn.Linear(d, config.projection_dim, bias=False)
        init_parameters(self, config.seed if init_seed is None else init_seed)
        self._passes = 0

    # ------------------------------------------------------------------ plumbing

    @property
    def pass_count(self) -> int:
        """Number of trunk forward passes since the last reset (instrumentation only)."""
        return self._passes

    def reset_pass_count(self) -> None:
        self._passes = 0

    def _param_dtype(self) -> torch.dtype:
        return self.class_token.dtype

    def _pos_embed(self, h: int, w: int) -> torch.Tensor:
        grid = self.pos_grid
        if (h, w) != tuple(grid.shape[:2]):
            grid = F.interpolate(
                grid.permute(2, 0, 1)[None], size=(h, w), mode="bilinear", align_corners=False
            )[0].permute(1, 2, 0)
        return grid.reshape(h * w, -1)

    def _embed_patches(self, image) -> tuple[torch.Tensor, tuple[int, int], tuple[int, int]]:
        """Pixels -> patch tokens. Returns (tokens (N, D), patch grid, image size)."""
        arr = as_image_array(image)
        check_multiple(arr.shape[:2], self.config.patch_size)
        dtype = self._param_dtype()
        mean = torch.tensor(self.config.pixel_mean, dtype=dtype)
        std = torch.tensor(self.config.pixel_std, dtype=dtype)
        x = (torch.from_numpy(arr).to(dtype) - mean) / std
        x = x.permute(2, 0, 1)[None]
        tokens = self.patch_embed(x)[0]                     # (D, h, w)
        _, h, w = tokens.shape
        tokens = tokens.permute(1, 2, 0).reshape(h * w, -1)
        tokens = tokens + self._pos_embed(h, w)
        return tokens, (h, w), arr.shape[:2]

    def _trunk(
        self,
        patch_x: torch.Tensor,
        query_x: torch.Tensor | None = None,
        patch_bias: torch.Tensor | None = None,
        query_bias: torch.Tensor | None = None,
        prompt_x: torch.Tensor | None = None,
        prompt_bias: torch.Tensor | None = None,
        collect: bool = False,
    ):
        self._passes += 1
        states = [patch_x] if collect else None
        for block in self.blocks:
            patch_x, query_x, prompt_x = block(
                patch_x, query_x, patch_bias, query_bias, prompt_x, prompt_bias
            )
            if collect:
                states.append(patch_x)
        return patch_x, query_x, states

    def _project(self, token_state: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.proj(self.ln_final(token_state)), dim=-1)

    def _patch_features(self, final_patch_x: torch.Tensor, states, grid) -> np.ndarray:
        layer = self.config.feature_layer
        source = self.ln_final(final_patch_x) if layer == "last" else states[layer]
        h, w = grid
        return source.detach().cpu().numpy().reshape(h, w, -1)

    # ---------------------------------------------------------------- encoding

    def encode_image(self, image, collect_states: bool = False):
        """Encode a whole image.

        Returns ``(PatchFeatureMap, global_embedding)`` where the global
        embedding is the projected, L2-normalized class-token state; with
        ``collect_states`` a third element lists per-layer patch states.
        """
        tokens, grid, size = self._embed_patches(image)
        query = self.class_token[None, :]
        collect = collect_states or self.config.feature_layer != "last"
        patch_out, query_out, states = self._trunk(tokens, query, collect=collect)
        fmap = PatchFeatureMap(self._patch_features(patch_out, states, grid), image_size=size)
        global_emb = self._project(query_out[0]).detach()
        if collect_states:
            return fmap, global_emb, states
        return fmap, global_emb

    def encode_regions(
        self,
        image,
        masks,
        strategy: str = "context_aware",
        token_bank: RegionTokenBank | None = None,
        region_ids: list[int] | None = None,
    ) -> list[RegionEmbedding]:
        """Encode every requested region of ``image`` under one masking strategy.

        ``masks`` is a RegionMaskSet on this image's patch grid. Regions whose
        mask is empty are skipped with a warning. Gradients flow into
        ``token_bank`` when one is supplied.
        """
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown masking strategy {strategy!r}; choose from {STRATEGIES}")
        tokens, grid, size = self._embed_patches(image)
        low_res = np.asarray(masks.low_res)
        if low_res.shape != grid:
            raise DataError(
                f"mask grid {low_res.shape} does not match image patch grid {grid}"
            )

        if region_ids is None:
            region_ids = sorted(int(i) for i in masks.present_ids)
        flat = low_res.reshape(-1)
        kept: list[int] = []
        for rid in region_ids:
            if (flat == rid).any():
                kept.append(int(rid))
            else:
                warnings.warn(f"region {rid} has an empty mask; skipped", stacklevel=2)
        if not kept:
            return []
        if token_bank is not None:
            if token_bank.embed_dim != self.config.embed_dim:
                raise ConfigError("token bank dimension does not match encoder embed_dim")
            top = max(kept)
            if top >= token_bank.num_regions:
                raise ConfigError(
                    f"region id {top} outside token bank of size {token_bank.num_regions}"
                )

        if strategy == "pixel_mask":
            return self._encode_pixel_masked(image, masks, kept, token_bank)

        dtype = self._param_dtype()
        member = torch.from_numpy(
            np.stack([flat == rid for rid in kept]).astype(np.bool_)
        )  # (K, N)
        neg = torch.tensor(float("-inf"), dtype=dtype)
        zero = torch.tensor(0.0, dtype=dtype)
        query_bias = torch.where(member, zero, neg)

        patch_bias = None
        if strategy == "token_mask":
            same = torch.from_numpy(flat)[:, None] == torch.from_numpy(flat)[None, :]
            patch_bias = torch.where(same, zero, neg)

        base = self.class_token[None, :].expand(len(kept), -1)
        prompt_x = prompt_bias = None
        if token_bank is not None:
            bank_rows = token_bank.tokens[torch.tensor(kept, dtype=torch.long)]
            if self.config.token_mode == "additive":
                query = base + bank_rows
            else:
                query = base
                prompt_x = bank_rows
                prompt_bias = query_bias
                # widen class rows so class token k also sees prompt key k
                eye = torch.eye(len(kept), dtype=torch.bool)
                query_bias = torch.cat([query_bias, torch.where(eye, zero, neg)], dim=1)
        else:
            query = base

        _, query_out, _ = self._trunk(
            tokens, query, patch_bias, query_bias, prompt_x, prompt_bias
        )
        vectors = self._project(query_out)
        return [RegionEmbedding(vector=vectors[i], region_id=rid) for i, rid in enumerate(kept)]

    def _encode_pixel_masked(self, image, masks, kept, token_bank):
        arr = as_image_array(image)
        high = np.asarray(masks.high_res)
        if high.shape != arr.shape[:2]:
            raise DataError(
                f"pixel mask shape {high.shape} does not match image {arr.shape[:2]}"
            )
        fill = np.asarray(self.config.pixel_mean, dtype=np.float32)
        out = []
        for rid in kept:
            masked = np.where((high == rid)[..., None], arr, fill)
            tokens, _, _ = self._embed_patches(masked)
            query = self.class_token[None, :]
            if token_bank is not None:
                extra = token_bank.tokens[rid][None, :]
                if self.config.token_mode == "additive":
                    query = query + extra
                    extra = None
            else:
                extra = None
            if extra is not None:
                # concat mode: the prompt rides along as an extra key for the class token
                _, query_out, _ = self._trunk(tokens, query, prompt_x=extra)
            else:
                _, query_out, _ = self._trunk(tokens, query)
            out.append(RegionEmbedding(vector=self._project(query_out)[0], region_id=rid))
        return out
