"""Region-level adaption: one-way noun-region contrastive fine-tuning.

Each caption contributes its nouns; each image contributes its region
embeddings. Every noun is matched to its single closest region (the one-way
assignment), the matched cosines average into an image-sentence score, and the
batch score matrix feeds a temperature-scaled contrastive loss. Only the
region token bank trains; both encoders stay frozen.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DataError
from .grouping import Codebook, cluster_image, upsample_masks
from .recognition import embed_phrases

DIRECTIONS = ("noun_to_region", "region_to_noun", "bidirection")
LOSS_FORMS = ("log", "literal")
MAX_INV_TAU = 100.0


# --------------------------------------------------------------------- types


@dataclass
class CaptionRecord:
    image_ref: str
    caption: str
    nouns: list[str] | None = None

    def __post_init__(self):
        if not self.caption or not self.caption.strip():
            raise DataError(f"caption for {self.image_ref!r} is empty")
        if self.nouns is not None and len(self.nouns) < 1:
            raise DataError(f"precomputed noun list for {self.image_ref!r} is empty")


@dataclass
class NounRegionAssignment:
    """Entry l is the region index sigma(l) chosen for noun l."""

    mapping: np.ndarray
    num_regions: int

    def __post_init__(self):
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        if self.mapping.ndim != 1:
            raise ConfigError("assignment mapping must be one-dimensional")
        if self.mapping.size and (self.mapping.min() < 0 or self.mapping.max() >= self.num_regions):
            raise ConfigError("assignment entries must be valid region indices")


@dataclass
class ScoreMatrix:
    """Batch image-sentence scores; entry (i, j) pairs caption i with image j."""

    scores: torch.Tensor

    def __post_init__(self):
        if self.scores.ndim != 2 or self.scores.shape[0] != self.scores.shape[1]:
            raise ConfigError(f"score matrix must be square, got {tuple(self.scores.shape)}")
        detached = self.scores.detach()
        if not torch.isfinite(detached).all():
            raise DataError("score matrix contains non-finite entries")
        if detached.abs().max() > 1.0 + 1e-6:
            raise DataError("scores are means of cosines and must lie in [-1, 1]")

    @property
    def batch_size(self) -> int:
        return self.scores.shape[0]


# ----------------------------------------------------------- noun extraction


def load_word_list(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip().lower() for line in fh if line.strip()]


def load_caption_dataset(path) -> list[CaptionRecord]:
    """Read the JSON-lines caption file: {"image", "caption", "nouns"?} per line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(
                    CaptionRecord(
                        image_ref=obj["image"],
                        caption=obj["caption"],
                        nouns=obj.get("nouns"),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad caption record: {exc}") from exc
    if not records:
        raise DataError(f"caption dataset {path!r} is empty")
    return records


def extract_nouns(record: CaptionRecord, lexicon, stopwords=()) -> list[str]:
    """Nouns for one caption: the precomputed list verbatim when present,
    otherwise lexicon words of the caption (stopwords dropped, order-preserving
    dedup). An empty result flags the record for skipping, not an error."""
    if record.nouns is not None:
        return list(record.nouns)
    lexicon = set(lexicon)
    if not lexicon:
        raise ConfigError("noun lexicon is empty")
    stop = set(stopwords)
    seen: set[str] = set()
    out = []
    for token in record.caption.lower().split():
        word = token.strip(".,;:!?'\"()")
        if not word or word in stop or word in seen or word not in lexicon:
            continue
        seen.add(word)
        out.append(word)
    return out


def embed_nouns(nouns: list[str], templates, text_encoder) -> torch.Tensor:
    """Same fill-average-normalize contract as category embedding."""
    if not nouns:
        raise ConfigError("no nouns to embed")
    return embed_phrases(nouns, list(templates), text_encoder)


# ------------------------------------------------------- scores and the loss


def _unit_rows(x: torch.Tensor, name: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    if (norms.detach() == 0).any():
        raise DataError(f"{name} contains a zero-norm embedding")
    return x / norms


def _as_matrix(x, name: str) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    if t.ndim != 2 or t.shape[0] < 1:
        raise ConfigError(f"{name} must be a non-empty 2-d matrix")
    return t


def assign_nouns(noun_embs, region_embs) -> NounRegionAssignment:
    """One-way assignment: each noun maps to its argmax-cosine region.

    Ties break toward the lowest region index; regions are never forced to
    receive a noun.
    """
    nouns = _unit_rows(_as_matrix(noun_embs, "noun embeddings"), "noun embeddings")
    regions = _unit_rows(_as_matrix(region_embs, "region embeddings"), "region embeddings")
    if nouns.shape[1] != regions.shape[1]:
        raise ConfigError("noun and region embedding dimensions differ")
    sims = (nouns @ regions.T).detach().cpu().numpy()
    mapping = np.argmax(sims, axis=1)  # first max = lowest index
    return NounRegionAssignment(mapping=mapping, num_regions=regions.shape[0])


def image_sentence_score(noun_embs, region_embs, direction: str = "noun_to_region") -> torch.Tensor:
    """Mean cosine over assigned pairs; assignment recomputed per call.

    The argmax acts as a fixed selector during differentiation (subgradient of
    the max), so gradients flow only through the selected cosine terms.
    """
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction {direction!r}; choose from {DIRECTIONS}")
    nouns = _unit_rows(_as_matrix(noun_embs, "noun embeddings"), "noun embeddings")
    regions = _unit_rows(_as_matrix(region_embs, "region embeddings"), "region embeddings")
    if nouns.shape[1] != regions.shape[1]:
        raise ConfigError("noun and region embedding dimensions differ")
    sims = nouns @ regions.T

    def one_way(table: torch.Tensor) -> torch.Tensor:
        idx = torch.from_numpy(np.argmax(table.detach().cpu().numpy(), axis=1))
        return table.gather(1, idx[:, None]).mean()

    if direction == "noun_to_region":
        return one_way(sims)
    if direction == "region_to_noun":
        return one_way(sims.T)
    return 0.5 * (one_way(sims) + one_way(sims.T))


def compute_score_matrix(noun_sets, region_sets, direction: str = "noun_to_region") -> ScoreMatrix:
    """Full B x B score matrix from per-caption noun and per-image region sets."""
    b = len(noun_sets)
    if b != len(region_sets) or b < 1:
        raise ConfigError("need equally many caption noun sets and image region sets")
    rows = []
    for nouns in noun_sets:
        rows.append(
            torch.stack([image_sentence_score(nouns, regions, direction) for regions in region_sets])
        )
    return ScoreMatrix(scores=torch.stack(rows))


def contrastive_loss(scores, logit_scale, form: str = "log") -> torch.Tensor:
    """Symmetric batch contrastive loss over the score matrix.

    ``log`` (default) is the standard log-softmax cross-entropy over rows and
    columns; ``literal`` averages the raw softmax diagonal ratios instead
    (no logarithm), provided for comparison.
    """
    if form not in LOSS_FORMS:
        raise ConfigError(f"unknown loss form {form!r}; choose from {LOSS_FORMS}")
    table = scores.scores if isinstance(scores, ScoreMatrix) else _as_matrix(scores, "scores")
    if table.shape[0] != table.shape[1]:
        raise ConfigError(f"score matrix must be square, got {tuple(table.shape)}")
    scale = logit_scale if isinstance(logit_scale, torch.Tensor) else torch.tensor(float(logit_scale), dtype=table.dtype)
    inv_tau = scale.exp().clamp(max=MAX_INV_TAU)
    logits = table * inv_tau
    if form == "log":
        row = torch.log_softmax(logits, dim=1).diagonal().mean()
        col = torch.log_softmax(logits, dim=0).diagonal().mean()
    else:
        row = torch.softmax(logits, dim=1).diagonal().mean()
        col = torch.softmax(logits, dim=0).diagonal().mean()
    return -(row + col)


# ------------------------------------------------------------ fine-tuning


@dataclass
class AdaptionConfig:
    lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 1
    direction: str = "noun_to_region"
    loss_form: str = "log"
    strategy: str = "context_aware"
    shuffle: bool = True
    seed: int = 0
    templates: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"unknown direction {self.direction!r}")
        if self.loss_form not in LOSS_FORMS:
            raise ConfigError(f"unknown loss form {self.loss_form!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def make_optimizer(token_bank, cfg: AdaptionConfig) -> torch.optim.Optimizer:
    """AdamW over the bank; the temperature scalar is exempt from weight decay."""
    return torch.optim.AdamW(
        [
            {"params": [token_bank.tokens], "weight_decay": cfg.weight_decay},
            {"params": [token_bank.logit_scale], "weight_decay": 0.0},
        ],
        lr=cfg.lr,
    )


class AdaptionCorpus:
    """Caption records plus cached per-image masks and noun embeddings.

    Masks and noun embeddings never change during adaption (encoders and the
    codebook are frozen), so they are computed once.
    """

    def __init__(self, images, records, codebook: Codebook, vision, text,
                 cfg: AdaptionConfig, lexicon=(), stopwords=()):
        if len(images) != len(records):
            raise ConfigError("need one caption record per image")
        self.images = list(images)
        self.records = list(records)
        self.codebook = codebook
        self.vision = vision
        self.cfg = cfg
        templates = cfg.templates or ["a photo of a {}."]

        noun_lists: list[list[str]] = []
        for record in self.records:
            if record.nouns is not None:
                noun_lists.append(list(record.nouns))
                continue
            if not lexicon:
                raise ConfigError("caption records without precomputed nouns require a noun lexicon")
            noun_lists.append(extract_nouns(record, lexicon, stopwords))

        unique = sorted({n for nouns in noun_lists for n in nouns})
        if not unique:
            raise DataError("no caption record yielded any nouns")
        with torch.no_grad():
            table = embed_phrases(unique, templates, text)
        lookup = {noun: table[i] for i, noun in enumerate(unique)}

        self.masks = []
        self.noun_embs: list[torch.Tensor | None] = []
        self.valid: list[int] = []
        with torch.no_grad():
            for i, (image, nouns) in enumerate(zip(self.images, noun_lists)):
                fmap, _ = vision.encode_image(image)
                low = cluster_image(fmap, codebook)
                self.masks.append(upsample_masks(fmap, low, codebook, mode="replicate"))
                if not nouns:
                    self.noun_embs.append(None)
                    continue
                self.noun_embs.append(torch.stack([lookup[n] for n in nouns]))
                self.valid.append(i)

    def region_embeddings(self, index: int, token_bank) -> torch.Tensor:
        embs = self.vision.encode_regions(
            self.images[index], self.masks[index], strategy=self.cfg.strategy,
            token_bank=token_bank,
        )
        return torch.stack([e.vector for e in embs])


def adaption_step(corpus: AdaptionCorpus, indices, token_bank, optimizer,
                  cfg: AdaptionConfig) -> float | None:
    """One optimizer step over the batch ``indices``; returns the loss.

    Records without nouns are dropped (with their images); a batch with no
    valid pair is skipped with a warning and returns None.
    """
    usable = [i for i in indices if corpus.noun_embs[i] is not None]
    if not usable:
        warnings.warn("batch contains no caption with nouns; step skipped", stacklevel=2)
        return None
    noun_sets = [corpus.noun_embs[i] for i in usable]
    region_sets = [corpus.region_embeddings(i, token_bank) for i in usable]
    scores = compute_score_matrix(noun_sets, region_sets, cfg.direction)
    loss = contrastive_loss(scores, token_bank.logit_scale, cfg.loss_form)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def evaluate_loss(corpus: AdaptionCorpus, indices, token_bank, cfg: AdaptionConfig) -> float:
    """Contrastive loss over ``indices`` without touching the bank."""
    usable = [i for i in indices if corpus.noun_embs[i] is not None]
    if not usable:
        raise DataError("no valid caption records to evaluate")
    with torch.no_grad():
        noun_sets = [corpus.noun_embs[i] for i in usable]
        region_sets = [corpus.region_embeddings(i, token_bank) for i in usable]
        scores = compute_score_matrix(noun_sets, region_sets, cfg.direction)
        return float(contrastive_loss(scores, token_bank.logit_scale, cfg.loss_form))


def finetune(corpus: AdaptionCorpus, token_bank, cfg: AdaptionConfig,
             start_step: int = 0, on_step=None, indices=None) -> list[dict]:
    """Run the adaption epochs; returns one history row per executed step.

    ``indices`` restricts training to a subset of the corpus (e.g. a train
    split); records without nouns are dropped automatically.
    """
    optimizer = make_optimizer(token_bank, cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    pool = corpus.valid if indices is None else [i for i in indices if i in set(corpus.valid)]
    history = []
    step = start_step
    for epoch in range(cfg.epochs):
        order = list(pool)
        if cfg.shuffle:
            order = [order[i] for i in rng.permutation(len(order))]
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            loss = adaption_step(corpus, batch, token_bank, optimizer, cfg)
            if loss is None:
                continue
            step += 1
            row = {"step": step, "epoch": epoch, "loss": loss}
            history.append(row)
            if on_step is not None:
                on_step(row)
    return history
