"""Command-line surface: ``seggroup <command> --config <file> [--set k=v ...]``.

Commands: group, segment, finetune, eval, upper-bound, bench-masking,
synthesize. Exit codes: 0 success, 1 usage or configuration error, 2 data
error. Every command writes its resolved config and a manifest into the output
directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import warnings

import numpy as np
import torch

from . import alignment, evaluation, grouping, images, recognition
from .encoder import build_encoders, load_token_bank, save_token_bank, RegionTokenBank
from .errors import ConfigError, DataError, SegGroupError
from .features import load_external_features
from .ioutils import atomic_write_json, atomic_write_text
from .runconfig import RunConfig, load_config
from .synthetic import synthesize_corpus

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit code 1, not argparse's 2
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seggroup", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("group", "cluster images into region masks and fit/save the codebook"),
        ("segment", "run the full pipeline and write label maps and overlays"),
        ("finetune", "adapt the region token bank on caption data"),
        ("eval", "segment and score against ground truth (mIoU report)"),
        ("upper-bound", "score the grouping under optimal region labels"),
        ("bench-masking", "time the three masking strategies"),
        ("synthesize", "generate the synthetic shape corpus"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="YAML or JSON run configuration")
        cmd.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override one config entry (dotted path, JSON value)",
        )
    return parser


# ----------------------------------------------------------------- helpers


def _prepare_out(config: RunConfig, command: str) -> str:
    out_dir = config.paths.out_dir
    os.makedirs(out_dir, exist_ok=True)
    payload = {"command": command, "config_hash": config.config_hash(), **config.to_dict()}
    atomic_write_json(os.path.join(out_dir, "config.json"), payload)
    return out_dir


def _list_images(images_dir: str | None) -> list[tuple[str, str]]:
    if not images_dir:
        raise ConfigError("paths.images_dir is required for this command")
    if not os.path.isdir(images_dir):
        raise ConfigError(f"paths.images_dir does not exist: {images_dir}")
    out = []
    for name in sorted(os.listdir(images_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in IMAGE_EXTENSIONS:
            out.append((stem, os.path.join(images_dir, name)))
    if not out:
        raise DataError(f"no images found under {images_dir}")
    return out


def _prepare_image(config: RunConfig, path: str):
    """Load + optional shorter-side resize + pad. Returns (array, original, scaled)."""
    raw = images.load_image(path)
    original = raw.shape[:2]
    if config.inference.shorter_side:
        raw = images.resize_shorter(raw, config.inference.shorter_side)
    scaled = raw.shape[:2]
    return images.pad_to_multiple(raw, config.encoder.patch_size), original, scaled


def _restore_labels(labels: np.ndarray, scaled, original) -> np.ndarray:
    labels = labels[: scaled[0], : scaled[1]]
    if tuple(scaled) != tuple(original):
        labels = images.resize_labels_nearest(labels, original)
    return labels


def _feature_map(config: RunConfig, vision, stem: str, image):
    if config.paths.features_dir:
        return load_external_features(os.path.join(config.paths.features_dir, stem + ".tsr"))
    with torch.no_grad():
        fmap, _ = vision.encode_image(image)
    return fmap


def _acquire_codebook(config: RunConfig, vision, items, out_dir: str):
    """Load the configured codebook or fit one over ``items`` and save it."""
    if config.paths.codebook_file:
        return grouping.load_codebook(config.paths.codebook_file)
    fmaps = []
    for stem, path in items:
        image, _, _ = _prepare_image(config, path)
        fmaps.append(_feature_map(config, vision, stem, image))
    codebook = grouping.fit_codebook(
        fmaps, config.grouping.num_regions,
        seed=config.grouping.seed, metric=config.grouping.metric,
    )
    grouping.save_codebook(os.path.join(out_dir, "codebook.tsr"), codebook)
    return codebook


def _mask_set(config: RunConfig, codebook, fmap):
    if config.grouping.mode == "codebook":
        low = grouping.cluster_image(fmap, codebook)
        return grouping.upsample_masks(fmap, low, codebook, mode=config.grouping.upsample)
    low = grouping.per_image_kmeans(
        fmap, config.grouping.num_regions,
        seed=config.grouping.seed, metric=config.grouping.metric,
    )
    return grouping.upsample_masks(fmap, low, mode="replicate")


def _category_set(config: RunConfig) -> recognition.CategorySet:
    if not config.recognition.category_file:
        raise ConfigError("recognition.category_file is required for this command")
    names, file_templates = recognition.load_category_file(config.recognition.category_file)
    templates = list(recognition.DEFAULT_TEMPLATES)
    if config.recognition.templates_file:
        with open(config.recognition.templates_file, encoding="utf-8") as fh:
            templates = [line.strip() for line in fh if line.strip()]
    elif file_templates:
        templates = file_templates
    pool = None
    if config.recognition.background_pool_file:
        pool, _ = recognition.load_category_file(config.recognition.background_pool_file)
    return recognition.CategorySet(names=names, templates=templates, background_pool=pool)


def _token_bank(config: RunConfig, codebook) -> tuple[RegionTokenBank | None, int]:
    if config.grouping.mode != "codebook":
        return None, 0
    if config.paths.token_bank_file:
        bank, step, _ = load_token_bank(config.paths.token_bank_file)
        if bank.num_regions != codebook.num_regions:
            raise ConfigError("token bank size does not match the codebook")
        return bank, step
    return RegionTokenBank(codebook.num_regions, config.encoder.embed_dim), 0


# ---------------------------------------------------------------- commands


def cmd_group(config: RunConfig) -> int:
    out_dir = _prepare_out(config, "group")
    items = _list_images(config.paths.images_dir)
    vision, _ = build_encoders(config.encoder)
    low_dir = os.path.join(out_dir, "masks_low")
    high_dir = os.path.join(out_dir, "masks_high")
    os.makedirs(low_dir, exist_ok=True)
    os.makedirs(high_dir, exist_ok=True)

    entries, errors = [], []
    codebook = None
    if config.grouping.mode == "codebook":
        usable = []
        for stem, path in items:
            try:
                images.load_image(path)
                usable.append((stem, path))
            except DataError as exc:
                errors.append({"image": path, "error": str(exc)})
        if not usable:
            raise DataError("no readable images to fit the codebook")
        codebook = _acquire_codebook(config, vision, usable, out_dir)

    for stem, path in items:
        if any(e["image"] == path for e in errors):
            entries.append({"image": path, "status": "error"})
            continue
        try:
            image, original, scaled = _prepare_image(config, path)
            fmap = _feature_map(config, vision, stem, image)
            masks = _mask_set(config, codebook, fmap)
            images.save_id_png(os.path.join(low_dir, stem + ".png"), masks.low_res)
            images.save_id_png(os.path.join(high_dir, stem + ".png"), masks.high_res)
            entries.append({
                "image": path, "status": "ok",
                "regions": sorted(masks.present_ids),
                "original_size": list(original), "scaled_size": list(scaled),
            })
        except (DataError, SegGroupError) as exc:
            errors.append({"image": path, "error": str(exc)})
            entries.append({"image": path, "status": "error"})
    if not any(e["status"] == "ok" for e in entries):
        raise DataError("grouping failed for every input image")

    atomic_write_json(os.path.join(out_dir, "manifest.json"), {
        "command": "group", "config_hash": config.config_hash(),
        "inputs": entries, "errors": errors,
        "codebook": "codebook.tsr" if codebook is not None and not config.paths.codebook_file else config.paths.codebook_file,
    })
    return 0


def _segment_one(config, vision, codebook, bank, space, categories, path):
    image, original, scaled = _prepare_image(config, path)
    stem = os.path.splitext(os.path.basename(path))[0]
    fmap = _feature_map(config, vision, stem, image)
    masks = _mask_set(config, codebook, fmap)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with torch.no_grad():
            regions = vision.encode_regions(
                image, masks, strategy=config.inference.strategy, token_bank=bank
            )
        omissions = [str(w.message) for w in caught]
    labels = recognition.classify_regions(regions, space.embeddings)
    label_map = recognition.assemble_segmentation(masks, labels, categories)
    restored = _restore_labels(label_map.labels, scaled, original)
    final = recognition.LabelMap(labels=restored, legend=label_map.legend)
    return image, masks, final, omissions


def cmd_segment(config: RunConfig) -> int:
    out_dir = _prepare_out(config, "segment")
    items = _list_images(config.paths.images_dir)
    categories = _category_set(config)
    vision, text = build_encoders(config.encoder)
    codebook = _acquire_codebook(config, vision, items, out_dir) if config.grouping.mode == "codebook" else None
    bank, _ = _token_bank(config, codebook)
    with torch.no_grad():
        space = recognition.build_label_space(categories, text)

    labels_dir = os.path.join(out_dir, "labels")
    overlay_dir = os.path.join(out_dir, "overlays")
    os.makedirs(labels_dir, exist_ok=True)
    os.makedirs(overlay_dir, exist_ok=True)

    entries, errors = [], []
    for stem, path in items:
        try:
            image, masks, label_map, omissions = _segment_one(
                config, vision, codebook, bank, space, categories, path
            )
            images.save_label_map(os.path.join(labels_dir, stem + ".png"), label_map)
            raw = images.load_image(path)
            images.save_overlay(os.path.join(overlay_dir, stem + ".png"), raw,
                                recognition.LabelMap(labels=label_map.labels, legend=label_map.legend))
            entries.append({"image": path, "status": "ok", "omissions": omissions})
        except (DataError, SegGroupError) as exc:
            errors.append({"image": path, "error": str(exc)})
            entries.append({"image": path, "status": "error"})
    if not any(e["status"] == "ok" for e in entries):
        raise DataError("segmentation failed for every input image")

    atomic_write_json(os.path.join(out_dir, "legend.json"),
                      {str(k): v for k, v in categories.legend().items()})
    atomic_write_json(os.path.join(out_dir, "manifest.json"), {
        "command": "segment", "config_hash": config.config_hash(),
        "inputs": entries, "errors": errors,
    })
    return 0


def cmd_eval(config: RunConfig) -> int:
    if not config.paths.gt_dir:
        raise ConfigError("paths.gt_dir is required for eval")
    out_dir = _prepare_out(config, "eval")
    items = _list_images(config.paths.images_dir)
    categories = _category_set(config)
    vision, text = build_encoders(config.encoder)
    codebook = _acquire_codebook(config, vision, items, out_dir) if config.grouping.mode == "codebook" else None
    bank, _ = _token_bank(config, codebook)
    with torch.no_grad():
        space = recognition.build_label_space(categories, text)

    acc = evaluation.ConfusionAccumulator(categories.num_labels)
    for stem, path in items:
        gt_path = os.path.join(config.paths.gt_dir, stem + ".png")
        if not os.path.isfile(gt_path):
            raise DataError(f"missing ground truth for {stem!r}: {gt_path}")
        gt = images.load_label_png(gt_path)
        _, _, label_map, _ = _segment_one(config, vision, codebook, bank, space, categories, path)
        acc.add(label_map.labels.astype(np.int64), gt)

    report = evaluation.evaluation_report(acc)
    report["config_hash"] = config.config_hash()
    atomic_write_json(os.path.join(out_dir, "report.json"), report)
    atomic_write_json(os.path.join(out_dir, "manifest.json"), {
        "command": "eval", "config_hash": config.config_hash(),
        "num_images": len(items), "report": "report.json",
    })
    print(f"mIoU: {report['miou']:.2f}  pixel acc: {report['pixel_acc']:.2f}  images: {report['num_images']}")
    return 0


def cmd_upper_bound(config: RunConfig) -> int:
    if not config.paths.gt_dir:
        raise ConfigError("paths.gt_dir is required for upper-bound")
    out_dir = _prepare_out(config, "upper-bound")
    items = _list_images(config.paths.images_dir)
    vision, _ = build_encoders(config.encoder)
    codebook = _acquire_codebook(config, vision, items, out_dir) if config.grouping.mode == "codebook" else None

    pairs = []
    max_label = 0
    for stem, path in items:
        gt_path = os.path.join(config.paths.gt_dir, stem + ".png")
        if not os.path.isfile(gt_path):
            raise DataError(f"missing ground truth for {stem!r}: {gt_path}")
        gt = images.load_label_png(gt_path)
        image, original, scaled = _prepare_image(config, path)
        if tuple(scaled) != tuple(original):
            raise ConfigError("upper-bound requires keep-original-size inference (no shorter_side)")
        fmap = _feature_map(config, vision, stem, image)
        masks = _mask_set(config, codebook, fmap)
        high = masks.high_res[: original[0], : original[1]]
        pairs.append((high, gt))
        valid = gt[gt != recognition.IGNORE_ID]
        if valid.size:
            max_label = max(max_label, int(valid.max()))

    num_classes = max_label + 1
    dataset = evaluation.upper_bound_dataset(pairs, num_classes)
    per_image = evaluation.upper_bound_dataset(pairs, num_classes, per_image=True)
    report = {
        "config_hash": config.config_hash(),
        "num_classes": num_classes,
        "dataset": dataset,
        "per_image": {k: v for k, v in per_image.items() if k != "per_class_iou"},
    }
    atomic_write_json(os.path.join(out_dir, "report.json"), report)
    print(f"upper bound mIoU (dataset): {dataset['miou']:.2f} over {dataset['num_images']} images")
    return 0


def cmd_finetune(config: RunConfig) -> int:
    if not config.paths.captions_jsonl:
        raise ConfigError("paths.captions_jsonl is required for finetune")
    if config.grouping.mode != "codebook":
        raise ConfigError("finetune requires grouping.mode = codebook")
    out_dir = _prepare_out(config, "finetune")
    records = alignment.load_caption_dataset(config.paths.captions_jsonl)
    root = os.path.dirname(os.path.abspath(config.paths.captions_jsonl))

    vision, text = build_encoders(config.encoder)
    loaded = []
    for record in records:
        path = record.image_ref if os.path.isabs(record.image_ref) else os.path.join(root, record.image_ref)
        raw = images.load_image(path)
        if config.inference.shorter_side:
            raw = images.resize_shorter(raw, config.inference.shorter_side)
        loaded.append(images.pad_to_multiple(raw, config.encoder.patch_size))

    n_val = int(len(records) * config.adaption.val_fraction)
    train_idx = list(range(len(records) - n_val))
    val_idx = list(range(len(records) - n_val, len(records)))

    if config.paths.codebook_file:
        codebook = grouping.load_codebook(config.paths.codebook_file)
    else:
        with torch.no_grad():
            fmaps = [vision.encode_image(loaded[i])[0] for i in train_idx]
        codebook = grouping.fit_codebook(
            fmaps, config.grouping.num_regions,
            seed=config.grouping.seed, metric=config.grouping.metric,
        )
        grouping.save_codebook(os.path.join(out_dir, "codebook.tsr"), codebook)

    lexicon = alignment.load_word_list(config.adaption.lexicon_file) if config.adaption.lexicon_file else []
    stopwords = alignment.load_word_list(config.adaption.stopwords_file) if config.adaption.stopwords_file else []

    cfg = alignment.AdaptionConfig(
        lr=config.adaption.lr,
        weight_decay=config.adaption.weight_decay,
        batch_size=config.adaption.batch_size,
        epochs=config.adaption.epochs,
        direction=config.adaption.direction,
        loss_form=config.adaption.loss_form,
        strategy=config.inference.strategy,
        shuffle=config.adaption.shuffle,
        seed=config.grouping.seed,
    )
    corpus = alignment.AdaptionCorpus(
        loaded, records, codebook, vision, text, cfg, lexicon=lexicon, stopwords=stopwords
    )

    if config.adaption.resume_from:
        bank, start_step, _ = load_token_bank(config.adaption.resume_from)
        if bank.num_regions != codebook.num_regions:
            raise ConfigError("resume checkpoint does not match the codebook size")
    else:
        bank = RegionTokenBank(codebook.num_regions, config.encoder.embed_dim)
        start_step = 0

    val_before = alignment.evaluate_loss(corpus, val_idx, bank, cfg) if val_idx else None
    history = alignment.finetune(corpus, bank, cfg, start_step=start_step, indices=train_idx)
    val_after = alignment.evaluate_loss(corpus, val_idx, bank, cfg) if val_idx else None

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["step", "epoch", "loss"])
    writer.writeheader()
    for row in history:
        writer.writerow(row)
    atomic_write_text(os.path.join(out_dir, "loss.csv"), buf.getvalue())

    final_step = history[-1]["step"] if history else start_step
    save_token_bank(os.path.join(out_dir, "token_bank.tsr"), bank, step=final_step,
                    extra={"direction": cfg.direction, "loss_form": cfg.loss_form})
    atomic_write_json(os.path.join(out_dir, "metrics.json"), {
        "config_hash": config.config_hash(),
        "steps": len(history),
        "final_step": final_step,
        "train_loss_first": history[0]["loss"] if history else None,
        "train_loss_last": history[-1]["loss"] if history else None,
        "val_loss_before": val_before,
        "val_loss_after": val_after,
    })
    atomic_write_json(os.path.join(out_dir, "manifest.json"), {
        "command": "finetune", "config_hash": config.config_hash(),
        "captions": config.paths.captions_jsonl, "num_records": len(records),
        "outputs": ["token_bank.tsr", "loss.csv", "metrics.json"],
    })
    return 0


def cmd_bench_masking(config: RunConfig) -> int:
    out_dir = _prepare_out(config, "bench-masking")
    vision, _ = build_encoders(config.encoder)
    if config.benchmark.image:
        items = [(os.path.splitext(os.path.basename(config.benchmark.image))[0], config.benchmark.image)]
    else:
        items = _list_images(config.paths.images_dir)[:1]
    stem, path = items[0]
    image, _, _ = _prepare_image(config, path)
    fmap = _feature_map(config, vision, stem, image)
    codebook = _acquire_codebook(config, vision, [(stem, path)], out_dir) if config.grouping.mode == "codebook" else None
    masks = _mask_set(config, codebook, fmap)
    report = evaluation.benchmark_masking(
        vision, image, masks,
        repeats=config.benchmark.repeats, warmup=config.benchmark.warmup,
    )
    report["image"] = path
    report["config_hash"] = config.config_hash()
    atomic_write_json(os.path.join(out_dir, "benchmark.json"), report)
    for name, row in report["strategies"].items():
        print(f"{name:14s} median {row['median_ms']:8.2f} ms  passes {row['passes']:3d}  "
              f"fidelity {row['fidelity_cosine']:.4f}")
    return 0


def cmd_synthesize(config: RunConfig) -> int:
    out_dir = _prepare_out(config, "synthesize")
    manifest = synthesize_corpus(
        out_dir,
        config.synthesize.num_images,
        size=(config.synthesize.height, config.synthesize.width),
        seed=config.encoder.seed,
    )
    print(f"wrote {manifest['num_images']} images to {out_dir}")
    return 0


COMMANDS = {
    "group": cmd_group,
    "segment": cmd_segment,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "upper-bound": cmd_upper_bound,
    "bench-masking": cmd_bench_masking,
    "synthesize": cmd_synthesize,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config, overrides=args.set)
        return COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"seggroup: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"seggroup: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
