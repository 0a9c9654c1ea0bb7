"""Estimator facade over the two-stage pipeline.

``GroupingSegmenter`` wraps grouping, region recognition, and the optional
token-bank adaption behind a scikit-learn style fit/predict surface, so the
pipeline composes with the usual ecosystem tooling (``get_params``,
``set_params``, ``clone``).
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .alignment import AdaptionConfig, AdaptionCorpus, CaptionRecord, evaluate_loss, finetune
from .encoder import EncoderConfig, RegionTokenBank, build_encoders
from .errors import ConfigError
from .grouping import cluster_image, fit_codebook, per_image_kmeans, upsample_masks
from .recognition import CategorySet, LabelMap, assemble_segmentation, build_label_space, classify_regions
from .validation import as_image_array


class GroupingSegmenter(BaseEstimator):
    """Cluster images into regions, then recognize the regions open-vocabulary.

    ``fit`` learns the corpus codebook and, when captions are provided,
    fine-tunes the region token bank with the one-way noun-region contrastive
    loss; ``predict`` emits one label map per image. Only the token bank ever
    trains: both encoders stay frozen.
    """

    def __init__(
        self,
        category_names=None,
        background_pool=None,
        templates=None,
        n_regions: int = 8,
        metric: str = "cosine",
        grouping_mode: str = "codebook",
        strategy: str = "context_aware",
        upsample: str = "bilinear",
        encoder_config: EncoderConfig | None = None,
        lr: float = 5e-4,
        weight_decay: float = 0.01,
        batch_size: int = 8,
        epochs: int = 1,
        direction: str = "noun_to_region",
        loss_form: str = "log",
        seed: int = 0,
    ):
        self.category_names = category_names
        self.background_pool = background_pool
        self.templates = templates
        self.n_regions = n_regions
        self.metric = metric
        self.grouping_mode = grouping_mode
        self.strategy = strategy
        self.upsample = upsample
        self.encoder_config = encoder_config
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.direction = direction
        self.loss_form = loss_form
        self.seed = seed

    # ------------------------------------------------------------------ fit

    def _encoder_config(self) -> EncoderConfig:
        if self.encoder_config is not None:
            return self.encoder_config
        return EncoderConfig(seed=self.seed)

    def _category_set(self) -> CategorySet:
        if not self.category_names:
            raise ConfigError("category_names must be set before predicting")
        kwargs = {}
        if self.templates:
            kwargs["templates"] = list(self.templates)
        return CategorySet(
            names=list(self.category_names),
            background_pool=list(self.background_pool) if self.background_pool else None,
            **kwargs,
        )

    def fit(self, images, captions=None):
        """Learn the codebook from ``images``; adapt the token bank if captions given.

        ``captions`` may be plain strings or CaptionRecord objects aligned with
        ``images``.
        """
        if self.grouping_mode not in ("codebook", "per_image"):
            raise ConfigError(f"unknown grouping mode {self.grouping_mode!r}")
        images = [as_image_array(im) for im in images]
        if not images:
            raise ConfigError("need at least one image to fit")
        config = self._encoder_config()
        self.vision_, self.text_ = build_encoders(config)

        self.codebook_ = None
        self.token_bank_ = None
        self.loss_history_ = []
        if self.grouping_mode == "codebook":
            with torch.no_grad():
                fmaps = [self.vision_.encode_image(im)[0] for im in images]
            self.codebook_ = fit_codebook(fmaps, self.n_regions, seed=self.seed, metric=self.metric)
            self.token_bank_ = RegionTokenBank(self.n_regions, config.embed_dim)

        if captions is not None:
            if self.grouping_mode != "codebook":
                raise ConfigError("token-bank adaption requires codebook grouping mode")
            records = [
                c if isinstance(c, CaptionRecord) else CaptionRecord(image_ref=str(i), caption=str(c))
                for i, c in enumerate(captions)
            ]
            cfg = self._adaption_config()
            corpus = AdaptionCorpus(
                images, records, self.codebook_, self.vision_, self.text_, cfg,
                lexicon=self.category_names or (),
            )
            self.loss_history_ = finetune(corpus, self.token_bank_, cfg)
        return self

    def _adaption_config(self) -> AdaptionConfig:
        return AdaptionConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            direction=self.direction,
            loss_form=self.loss_form,
            strategy=self.strategy,
            seed=self.seed,
            templates=list(self.templates) if self.templates else [],
        )

    def _check_fitted(self):
        if not hasattr(self, "vision_"):
            raise ConfigError("this GroupingSegmenter instance is not fitted yet")

    # ------------------------------------------------------------- inference

    def group(self, image):
        """Region masks for one image (grouping stage only)."""
        self._check_fitted()
        image = as_image_array(image)
        with torch.no_grad():
            fmap, _ = self.vision_.encode_image(image)
        if self.grouping_mode == "codebook":
            low = cluster_image(fmap, self.codebook_)
            return upsample_masks(fmap, low, self.codebook_, mode=self.upsample)
        low = per_image_kmeans(fmap, self.n_regions, seed=self.seed, metric=self.metric)
        return upsample_masks(fmap, low, mode="replicate")

    def transform(self, images):
        """Grouping for every image; returns a list of RegionMaskSet."""
        return [self.group(im) for im in images]

    def predict(self, images) -> list[LabelMap]:
        """Full segmentation label map per image."""
        self._check_fitted()
        categories = self._category_set()
        with torch.no_grad():
            space = build_label_space(categories, self.text_)
        out = []
        for image in images:
            masks = self.group(image)
            bank = self.token_bank_ if self.grouping_mode == "codebook" else None
            with torch.no_grad():
                regions = self.vision_.encode_regions(
                    image, masks, strategy=self.strategy, token_bank=bank
                )
                labels = classify_regions(regions, space.embeddings)
            out.append(assemble_segmentation(masks, labels, categories))
        return out

    def score_captions(self, images, captions) -> float:
        """Validation contrastive loss of the current bank on held-out pairs."""
        self._check_fitted()
        if self.grouping_mode != "codebook":
            raise ConfigError("caption scoring requires codebook grouping mode")
        records = [
            c if isinstance(c, CaptionRecord) else CaptionRecord(image_ref=str(i), caption=str(c))
            for i, c in enumerate(captions)
        ]
        cfg = self._adaption_config()
        corpus = AdaptionCorpus(
            [as_image_array(im) for im in images], records, self.codebook_,
            self.vision_, self.text_, cfg, lexicon=self.category_names or (),
        )
        return evaluate_loss(corpus, corpus.valid, self.token_bank_, cfg)
