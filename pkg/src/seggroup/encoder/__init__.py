"""Vision and text encoders with region-masked readout."""

from __future__ import annotations

from .bank import RegionTokenBank, load_token_bank, save_token_bank
from .config import EncoderConfig
from .text import TextEncoder
from .vision import STRATEGIES, RegionEmbedding, VisionEncoder

_TEXT_SEED_OFFSET = 0x5EC0DE  # vision and text draw from distinct init streams


def build_encoders(config: EncoderConfig) -> tuple[VisionEncoder, TextEncoder]:
    """Build the deterministic, frozen-capable encoder pair for ``config``."""
    vision = VisionEncoder(config, init_seed=config.seed)
    text = TextEncoder(config, init_seed=config.seed + _TEXT_SEED_OFFSET)
    vision.eval()
    text.eval()
    for param in list(vision.parameters()) + list(text.parameters()):
        param.requires_grad_(False)
    return vision, text


__all__ = [
    "EncoderConfig",
    "VisionEncoder",
    "TextEncoder",
    "RegionTokenBank",
    "RegionEmbedding",
    "STRATEGIES",
    "build_encoders",
    "save_token_bank",
    "load_token_bank",
]
