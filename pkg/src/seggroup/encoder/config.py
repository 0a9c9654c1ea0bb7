"""Encoder hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ConfigError


@dataclass(frozen=True)
class EncoderConfig:
    """Configuration shared by the vision and text transformers.

    Identical configs with identical seeds build bit-identical weights.
    """

    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    text_context_len: int = 32
    projection_dim: int = 32
    seed: int = 0
    vocab_size: int = 4096
    mlp_ratio: float = 4.0
    pos_grid_size: int = 14
    pixel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    # "additive" adds each region token to the shared class token;
    # "concat" exposes it as an extra key visible only to that region's class token.
    token_mode: str = "additive"
    # patch features handed to the grouping stage: "last" = final-norm output,
    # an int selects the residual stream after that block (0 = patch embedding).
    feature_layer: int | str = "last"

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        for name in ("patch_size", "depth", "projection_dim", "num_heads", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.text_context_len < 3:
            raise ConfigError("text_context_len must fit at least BOS, one word, and EOS")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size too small")
        if self.token_mode not in ("additive", "concat"):
            raise ConfigError(f"unknown token_mode {self.token_mode!r}")
        if self.feature_layer != "last":
            if not isinstance(self.feature_layer, int):
                raise ConfigError("feature_layer must be 'last' or a block index")
            if not 0 <= self.feature_layer <= self.depth:
                raise ConfigError(
                    f"feature_layer {self.feature_layer} out of range for depth {self.depth}"
                )
        if len(self.pixel_mean) != 3 or len(self.pixel_std) != 3:
            raise ConfigError("pixel_mean / pixel_std must have 3 channels")
        if any(s <= 0 for s in self.pixel_std):
            raise ConfigError("pixel_std entries must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads
