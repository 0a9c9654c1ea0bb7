"""Declarative run configuration for the CLI.

One YAML or JSON file describes a whole run; ``--set key.path=value`` overrides
individual entries and the SEGGROUP_SEED environment variable overrides every
seed. Unknown keys are rejected, referenced files must exist at load time, and
the resolved config is serialized into every output directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from .encoder import EncoderConfig
from .errors import ConfigError

_FILE_FIELDS = {
    "category_file", "background_pool_file", "templates_file", "captions_jsonl",
    "codebook_file", "token_bank_file", "lexicon_file", "stopwords_file",
    "resume_from", "image",
}


@dataclass
class GroupingSection:
    num_regions: int = 27
    metric: str = "cosine"
    mode: str = "codebook"
    seed: int = 0
    upsample: str = "bilinear"

    def __post_init__(self):
        if self.mode not in ("codebook", "per_image"):
            raise ConfigError(f"grouping.mode must be codebook or per_image, got {self.mode!r}")
        if self.num_regions < 2:
            raise ConfigError("grouping.num_regions must be >= 2")


@dataclass
class RecognitionSection:
    category_file: str | None = None
    background_pool_file: str | None = None
    templates_file: str | None = None


@dataclass
class AdaptionSection:
    lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 1
    direction: str = "noun_to_region"
    loss_form: str = "log"
    val_fraction: float = 0.0
    shuffle: bool = True
    lexicon_file: str | None = None
    stopwords_file: str | None = None
    resume_from: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("adaption.val_fraction must be in [0, 1)")


@dataclass
class PathsSection:
    images_dir: str | None = None
    out_dir: str = "out"
    features_dir: str | None = None
    captions_jsonl: str | None = None
    gt_dir: str | None = None
    codebook_file: str | None = None
    token_bank_file: str | None = None


@dataclass
class InferenceSection:
    strategy: str = "context_aware"
    shorter_side: int | None = None  # None keeps images at their original size


@dataclass
class BenchmarkSection:
    repeats: int = 20
    warmup: int = 3
    image: str | None = None


@dataclass
class SynthesizeSection:
    num_images: int = 24
    height: int = 96
    width: int = 96


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    grouping: GroupingSection = field(default_factory=GroupingSection)
    recognition: RecognitionSection = field(default_factory=RecognitionSection)
    adaption: AdaptionSection = field(default_factory=AdaptionSection)
    paths: PathsSection = field(default_factory=PathsSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    synthesize: SynthesizeSection = field(default_factory=SynthesizeSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


_SECTION_ALIASES = {"grouping": {"M": "num_regions"}}


def _build_section(cls, data, section: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    aliases = _SECTION_ALIASES.get(section, {})
    data = {aliases.get(k, k): v for k, v in data.items()}
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    if cls is EncoderConfig:
        for key in ("pixel_mean", "pixel_std"):
            if key in data:
                data[key] = tuple(data[key])
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad values in section {section!r}: {exc}") from exc


_SECTIONS = {
    "encoder": EncoderConfig,
    "grouping": GroupingSection,
    "recognition": RecognitionSection,
    "adaption": AdaptionSection,
    "paths": PathsSection,
    "inference": InferenceSection,
    "benchmark": BenchmarkSection,
    "synthesize": SynthesizeSection,
}


def _parse_override(raw: str) -> tuple[list[str], object]:
    if "=" not in raw:
        raise ConfigError(f"--set expects key=value, got {raw!r}")
    key, value = raw.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) < 2:
        raise ConfigError(f"--set key must be section.field, got {key!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return parts, parsed


def _apply_overrides(tree: dict, overrides) -> dict:
    for raw in overrides or ():
        parts, value = _parse_override(raw)
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {'.'.join(parts)!r} crosses a non-mapping entry")
        node[parts[-1]] = value
    return tree


def _resolve_paths(config: RunConfig, base_dir: str) -> None:
    def resolve(value):
        return os.path.normpath(os.path.join(base_dir, value)) if value else value

    for section in (config.paths, config.recognition, config.adaption, config.benchmark):
        for f in dataclasses.fields(section):
            if (f.name.endswith(("_dir", "_file", "_jsonl", "_from")) or f.name in _FILE_FIELDS) \
                    and isinstance(getattr(section, f.name), str):
                setattr(section, f.name, resolve(getattr(section, f.name)))


def _check_referenced_files(config: RunConfig) -> None:
    for section in (config.recognition, config.adaption, config.paths, config.benchmark):
        for f in dataclasses.fields(section):
            if f.name in _FILE_FIELDS:
                value = getattr(section, f.name)
                if value and not os.path.isfile(value):
                    raise ConfigError(f"configured file does not exist: {value}")


def load_config(path, overrides=(), env=None) -> RunConfig:
    """Parse, override, resolve, and validate one run configuration file."""
    env = os.environ if env is None else env
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    try:
        tree = yaml.safe_load(text) if path.endswith((".yaml", ".yml")) else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path!r}: {exc}") from exc
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(f"config root must be a mapping, got {type(tree).__name__}")

    unknown = set(tree) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    tree = _apply_overrides(tree, overrides)

    sections = {name: _build_section(cls, tree.get(name), name) for name, cls in _SECTIONS.items()}
    config = RunConfig(**sections)

    seed_override = env.get("SEGGROUP_SEED")
    if seed_override is not None:
        try:
            seed = int(seed_override)
        except ValueError as exc:
            raise ConfigError(f"SEGGROUP_SEED must be an integer, got {seed_override!r}") from exc
        config.encoder = dataclasses.replace(config.encoder, seed=seed)
        config.grouping.seed = seed

    _resolve_paths(config, os.path.dirname(os.path.abspath(path)))
    _check_referenced_files(config)
    return config
