"""seggroup: spatially-consistent grouping + open-vocabulary region recognition.

Two-stage text-supervised semantic segmentation at desk scale: cluster patch
features into consistent regions, then recognize every region in one forward
pass with masked class-token readout, optionally adapted by a one-way
noun-region contrastive loss over a learnable token bank.
"""

from .alignment import (
    AdaptionConfig,
    CaptionRecord,
    NounRegionAssignment,
    ScoreMatrix,
    assign_nouns,
    contrastive_loss,
    compute_score_matrix,
    embed_nouns,
    extract_nouns,
    image_sentence_score,
)
from .encoder import (
    EncoderConfig,
    RegionEmbedding,
    RegionTokenBank,
    TextEncoder,
    VisionEncoder,
    build_encoders,
)
from .errors import ConfigError, DataError, SegGroupError, TensorFormatError
from .evaluation import ConfusionAccumulator, accumulate, benchmark_masking, miou, upper_bound
from .features import PatchFeatureMap, load_external_features, save_features
from .grouping import (
    Codebook,
    CosineKMeans,
    RegionMaskSet,
    cluster_image,
    fit_codebook,
    per_image_kmeans,
    upsample_masks,
)
from .pipeline import GroupingSegmenter
from .recognition import (
    CategorySet,
    LabelMap,
    assemble_segmentation,
    classify_regions,
    embed_categories,
)
from .synthetic import synthesize_corpus

__version__ = "0.1.0"

__all__ = [
    "AdaptionConfig",
    "CaptionRecord",
    "CategorySet",
    "Codebook",
    "ConfigError",
    "ConfusionAccumulator",
    "CosineKMeans",
    "DataError",
    "EncoderConfig",
    "GroupingSegmenter",
    "LabelMap",
    "NounRegionAssignment",
    "PatchFeatureMap",
    "RegionEmbedding",
    "RegionMaskSet",
    "RegionTokenBank",
    "ScoreMatrix",
    "SegGroupError",
    "TensorFormatError",
    "TextEncoder",
    "VisionEncoder",
    "accumulate",
    "assemble_segmentation",
    "assign_nouns",
    "benchmark_masking",
    "build_encoders",
    "classify_regions",
    "cluster_image",
    "compute_score_matrix",
    "contrastive_loss",
    "embed_categories",
    "embed_nouns",
    "extract_nouns",
    "fit_codebook",
    "image_sentence_score",
    "load_external_features",
    "miou",
    "per_image_kmeans",
    "save_features",
    "synthesize_corpus",
    "upper_bound",
    "upsample_masks",
]
