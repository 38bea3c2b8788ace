"""Command-line pipeline: synth, extract, train-relevance, train-epoch,
predict, evaluate, inspect.

Stages communicate through files (manifest CSV, patch CSV + raw float32
descriptors, binary model files, JSON-lines predictions), so each stage
can be re-run independently. Every command echoes its fully resolved
configuration to stderr as one JSON line before doing any work.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 data error.
"""

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import classify, data, evaluation, fusion, imaging, io_utils, patches, selection
from .config import PipelineConfig, config_to_dict, load_config
from .errors import (
    ConfigError,
    EmptyInputError,
    IoError,
    NoPatchesError,
    PipelineError,
)

RELEVANCE_MODEL_NAME = "relevance.model"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def _echo(command: str, args: argparse.Namespace, cfg: PipelineConfig) -> None:
    shown = {k: v for k, v in vars(args).items() if k != "func"}
    print(json.dumps({"command": command, "args": shown,
                      "config": config_to_dict(cfg)}, sort_keys=True,
                     default=str), file=sys.stderr)


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _load_rgb(manifest_path, record: data.ManifestRecord) -> np.ndarray:
    return imaging.load_image(
        io_utils.resolve_relative(manifest_path, record.image_path))


def _records_for_split(records, split: str | None):
    if split is None:
        return records
    chosen = [r for r in records if r.split == split]
    if not chosen:
        raise EmptyInputError(f"manifest has no records in split {split!r}")
    return chosen


def _ordered_map(worker, items, threads: int):
    """Map preserving input order, optionally across processes."""
    if threads <= 1:
        return [worker(item) for item in items]
    with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, items, chunksize=1))


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo("synth", args, cfg)
    out_dir = Path(args.out)
    corpus = data.synth_corpus(args.n_per_class, args.image_size,
                               args.clutter_fraction, cfg.seed)
    records = data.split_by_house(corpus.records, cfg.split_ratios, cfg.seed)
    for record, image, mask in zip(records, corpus.images, corpus.clutter_masks):
        imaging.save_image_png(out_dir / record.image_path, image)
        imaging.save_image_png(
            out_dir / "masks" / Path(record.image_path).name, mask)
    data.write_manifest(out_dir / "manifest.csv", records)
    print(f"synthesized {len(records)} images into {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# extract


def _mine_image(image: np.ndarray, cfg: PipelineConfig):
    """Dense descriptors and contrasts for every grid patch of one image."""
    from .descriptors import DESCRIPTOR_SIZE, contrast_scores, normalize_rows, sift_descriptors

    height, width = image.shape[:2]
    geometries = patches.sample_grid(width, height, cfg.patch.sides,
                                     cfg.patch.overlap)
    if not geometries:
        return [], np.zeros((0, DESCRIPTOR_SIZE)), np.zeros(0)
    gray = imaging.to_grayscale(image)
    raw = np.zeros((len(geometries), DESCRIPTOR_SIZE))
    row = 0
    for side in cfg.patch.sides:
        stride = patches.grid_stride(side, cfg.patch.overlap)
        if height < side or width < side:
            continue
        windows = np.lib.stride_tricks.sliding_window_view(gray, (side, side))
        block = windows[::stride, ::stride].reshape(-1, side, side)
        raw[row:row + block.shape[0]] = sift_descriptors(block, cfg.descriptor)
        row += block.shape[0]
    normalized, _ = normalize_rows(raw, cfg.descriptor)
    return geometries, normalized, contrast_scores(raw)


def _extract_one(task):
    manifest_path, record, cfg = task
    image = _load_rgb(manifest_path, record)
    geometries, normalized, contrasts = _mine_image(image, cfg)
    return record.image_path, geometries, normalized, contrasts


def cmd_extract(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo("extract", args, cfg)
    manifest_path = Path(args.manifest)
    records = _records_for_split(data.read_manifest(manifest_path), args.split)
    out_dir = Path(args.out)

    by_split: dict[str, list] = {}
    for record in records:
        by_split.setdefault(record.split or "all", []).append(record)

    for split, split_records in by_split.items():
        mined = _ordered_map(
            _extract_one,
            [(manifest_path, r, cfg) for r in split_records],
            args.threads)
        pooled = (cfg.selection.strategy == selection.STRATEGY_HIGH_CONTRAST
                  and not cfg.selection.per_image)
        rows, blocks = [], []
        if pooled:
            all_contrasts = np.concatenate([m[3] for m in mined if len(m[1])])
            keep = selection.select_top_contrast(
                all_contrasts, cfg.selection.t_percent)
            chosen_global = np.zeros(all_contrasts.shape[0], dtype=bool)
            chosen_global[keep] = True
        offset = 0
        for image_id, geometries, normalized, contrasts in mined:
            if not geometries:
                _warn(f"{image_id}: too small for any patch scale, skipped")
                continue
            if pooled:
                idx = np.flatnonzero(
                    chosen_global[offset:offset + len(geometries)])
                offset += len(geometries)
                cluster_ids = np.full(idx.shape, -1, dtype=np.intp)
            else:
                outcome = selection.select_patches(
                    normalized, contrasts, cfg.selection)
                idx, cluster_ids = outcome.indices, outcome.cluster_ids
            for i, cluster in zip(idx, cluster_ids):
                g = geometries[i]
                rows.append((image_id, g.x, g.y, g.side,
                             repr(float(contrasts[i])), int(cluster)))
            blocks.append(normalized[idx])
        io_utils.write_patch_csv(out_dir / f"patches_{split}.csv", rows)
        io_utils.write_f32_matrix(out_dir / f"descriptors_{split}.f32",
                                  np.concatenate(blocks) if blocks
                                  else np.zeros((0, 128)))
        print(f"extract[{split}]: {len(rows)} patches from "
              f"{len(split_records)} images")
    return 0


# ---------------------------------------------------------------------------
# training


def _load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except FileNotFoundError as exc:
        raise IoError(f"no clutter mask at {path} (expected masks/<image>.png "
                      f"next to the manifest, or use --patch-labels)") from exc
    except OSError as exc:
        raise IoError(f"cannot read mask {path}: {exc}") from exc


def _relevance_examples_from_masks(manifest_path, records, cfg):
    """Grid patches labeled through the synthetic clutter masks, subsampled
    to at most relevance_patches_per_image per image (clutter first)."""
    pixel_stacks, labels = [], []
    for index, record in enumerate(records):
        image = _load_rgb(manifest_path, record)
        mask = _load_mask(manifest_path.parent / "masks"
                          / Path(record.image_path).name)
        geometries = patches.sample_grid(
            image.shape[1], image.shape[0], cfg.patch.sides, cfg.patch.overlap)
        if not geometries:
            continue
        patch_labels = classify.patch_labels_from_mask(mask, geometries)
        rng = np.random.default_rng([cfg.relevance_train.seed, index])
        cap = cfg.relevance_patches_per_image
        clutter = rng.permutation(np.flatnonzero(patch_labels > 0))
        building = rng.permutation(np.flatnonzero(patch_labels == 0))
        take = list(clutter[:cap // 2])
        take += list(building[:cap - len(take)])
        if len(take) < cap:
            take += list(clutter[cap // 2:cap // 2 + cap - len(take)])
        chosen = np.sort(np.array(take, dtype=np.intp))
        pixels = [patches.extract(image, geometries[i]).pixels for i in chosen]
        pixel_stacks.append(classify.stack_resized(pixels, cfg.feature_side))
        labels.append(patch_labels[chosen])
    if not pixel_stacks:
        raise EmptyInputError("no training patches could be collected")
    return np.concatenate(pixel_stacks), np.concatenate(labels)


def _relevance_examples_from_csv(manifest_path, records, cfg, label_path):
    rows = io_utils.read_patch_labels(label_path)
    by_image: dict[str, list] = {}
    for row in rows:
        by_image.setdefault(row["image_id"], []).append(row)
    pixel_stacks, labels = [], []
    for record in records:
        image_rows = by_image.get(record.image_path)
        if not image_rows:
            continue
        image = _load_rgb(manifest_path, record)
        pixels = [patches.extract(
            image, patches.PatchGeometry(r["x"], r["y"], r["side"])).pixels
            for r in image_rows]
        pixel_stacks.append(classify.stack_resized(pixels, cfg.feature_side))
        labels.append(np.array([r["label"] for r in image_rows], dtype=np.intp))
    if not pixel_stacks:
        raise EmptyInputError(f"{label_path} labels no patch of any training image")
    return np.concatenate(pixel_stacks), np.concatenate(labels)


def cmd_train_relevance(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo("train-relevance", args, cfg)
    manifest_path = Path(args.manifest)
    records = _records_for_split(data.read_manifest(manifest_path), "train")
    if args.patch_labels:
        stack, labels = _relevance_examples_from_csv(
            manifest_path, records, cfg, args.patch_labels)
    else:
        stack, labels = _relevance_examples_from_masks(
            manifest_path, records, cfg)
    print(f"train-relevance: {len(labels)} patches "
          f"({int((labels > 0).sum())} clutter)", file=sys.stderr)
    result = classify.train(
        stack, labels, cfg.relevance_arch, cfg.relevance_train,
        n_classes=len(classify.RELEVANCE_CLASSES),
        hidden_units=cfg.mlp_hidden_units, feature_side=cfg.feature_side)
    out_dir = Path(args.out)
    classify.save_model(out_dir / RELEVANCE_MODEL_NAME, result.model)
    io_utils.write_json(out_dir / "relevance_losses.json",
                        {"epoch_losses": result.epoch_losses})
    print(f"trained relevance filter: final loss {result.epoch_losses[-1]:.4f}")
    return 0


def _epoch_training_patches(manifest_path, records, cfg, patch_rows):
    by_image: dict[str, list] = {}
    for row in patch_rows:
        by_image.setdefault(row["image_id"], []).append(row)
    pixel_stacks, labels = [], []
    for record in records:
        image_rows = by_image.get(record.image_path)
        if not image_rows:
            continue
        image = _load_rgb(manifest_path, record)
        pixels = [patches.extract(
            image, patches.PatchGeometry(r["x"], r["y"], r["side"])).pixels
            for r in image_rows]
        pixel_stacks.append(classify.stack_resized(pixels, cfg.feature_side))
        epoch = data.epoch_of_year(record.yoc)
        labels.append(np.full(len(image_rows), epoch, dtype=np.intp))
    if not pixel_stacks:
        raise EmptyInputError("no training patches matched the manifest")
    return np.concatenate(pixel_stacks), np.concatenate(labels)


def cmd_train_epoch(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo("train-epoch", args, cfg)
    manifest_path = Path(args.manifest)
    records = _records_for_split(data.read_manifest(manifest_path), "train")
    stack, labels = _epoch_training_patches(
        manifest_path, records, cfg, io_utils.read_patch_csv(args.patches))

    if args.relevance_model:
        model = classify.load_model(args.relevance_model)
        base = classify.featurize_batch(stack, cfg.feature_side)
        keep = classify.relevance_keep_mask(model, base)
        if keep.any():
            stack, labels = stack[keep], labels[keep]
            print(f"relevance filter kept {int(keep.sum())}/{len(keep)} "
                  f"training patches", file=sys.stderr)
        else:
            _warn("relevance filter rejected every training patch; "
                  "training on the unfiltered set")

    out_dir = Path(args.out)
    import dataclasses as _dc
    for member, arch in enumerate(cfg.ensemble):
        member_cfg = _dc.replace(cfg.epoch_train,
                                 seed=cfg.epoch_train.seed + member)
        result = classify.train(
            stack, labels, arch, member_cfg, n_classes=data.N_EPOCHS,
            hidden_units=cfg.mlp_hidden_units, feature_side=cfg.feature_side)
        classify.save_model(out_dir / f"epoch_{member}_{arch}.model",
                            result.model)
        io_utils.write_json(out_dir / f"epoch_{member}_{arch}_losses.json",
                            {"epoch_losses": result.epoch_losses})
        print(f"trained {arch}: final loss {result.epoch_losses[-1]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# predict


def _load_epoch_models(models_dir: Path):
    paths = sorted(models_dir.glob("epoch_*.model"))
    if not paths:
        raise IoError(f"no epoch_*.model files in {models_dir}")
    return [classify.load_model(p) for p in paths]


def _predict_one(task):
    manifest_path, record, cfg, models_dir, use_relevance = task
    image = _load_rgb(manifest_path, record)
    epoch_models = _load_epoch_models(models_dir)
    relevance_model = None
    if use_relevance:
        relevance_model = classify.load_model(models_dir / RELEVANCE_MODEL_NAME)
    result = fusion.run_patch_pipeline(
        image, record.image_path, epoch_models, cfg.selection, cfg.patch,
        relevance_model, cfg.feature_side)
    prediction = fusion.aggregate(result.distributions, cfg.fusion)
    if result.relevance_fallback:
        prediction.low_confidence = True
    row = {
        "image_id": record.image_path,
        "epoch": prediction.epoch,
        "distribution": [float(v) for v in prediction.distribution],
        "n_patches_total": prediction.n_patches_total,
        "n_patches_used": prediction.n_patches_used,
        "low_confidence": bool(prediction.low_confidence),
    }
    patch_rows = [{
        "image_id": record.image_path, "x": g.x, "y": g.y, "side": g.side,
        "distribution": [float(v) for v in dist],
    } for g, dist in zip(result.geometries, result.distributions)]
    return row, patch_rows


def cmd_predict(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo("predict", args, cfg)
    manifest_path = Path(args.manifest)
    records = _records_for_split(data.read_manifest(manifest_path), args.split)
    models_dir = Path(args.models)
    use_relevance = (not args.no_relevance_filter) and \
        (models_dir / RELEVANCE_MODEL_NAME).exists()
    if not use_relevance and not args.no_relevance_filter:
        _warn(f"no {RELEVANCE_MODEL_NAME} in {models_dir}; "
              f"predicting without the relevance filter")
    # Load once up front to fail fast; workers reload in their own process.
    _load_epoch_models(models_dir)

    tasks = [(manifest_path, r, cfg, models_dir, use_relevance) for r in records]
    rows, patch_rows = [], []
    if args.threads > 1:
        outputs = _ordered_map(_predict_one, tasks, args.threads)
    else:
        outputs = []
        for task in tasks:
            try:
                outputs.append(_predict_one(task))
            except NoPatchesError as exc:
                _warn(str(exc))
    for row, image_patch_rows in outputs:
        rows.append(row)
        patch_rows.extend(image_patch_rows)
    if not rows:
        raise EmptyInputError("no image produced a prediction")
    io_utils.write_jsonl(args.out, rows)
    if args.patch_out:
        io_utils.write_jsonl(args.patch_out, patch_rows)
    print(f"predicted {len(rows)} images -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate / inspect


def _truth_by_image(manifest_path) -> dict[str, int]:
    records = data.read_manifest(manifest_path)
    return {r.image_path: data.epoch_of_year(r.yoc) for r in records}


def _match_truths(rows, truths, what: str):
    missing = [row["image_id"] for row in rows if row["image_id"] not in truths]
    if missing:
        raise EmptyInputError(
            f"{what}: {len(missing)} image id(s) absent from manifest, "
            f"first {missing[0]!r}")


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo("evaluate", args, cfg)
    rows = io_utils.read_jsonl(args.predictions)
    if not rows:
        raise EmptyInputError(f"{args.predictions} is empty")
    truths_map = _truth_by_image(Path(args.manifest))
    _match_truths(rows, truths_map, args.predictions)
    predicted = [row["epoch"] for row in rows]
    truth = [truths_map[row["image_id"]] for row in rows]

    matrix = evaluation.confusion_matrix(predicted, truth)
    metrics = {
        "n_images": len(rows),
        "accuracy": evaluation.accuracy(predicted, truth),
        "top1_error": evaluation.top1_error(predicted, truth),
        "zero_rule_baseline": evaluation.zero_rule_baseline(truth),
        "underestimation_fraction": evaluation.underestimation_fraction(matrix),
        "epoch_names": list(data.EPOCH_NAMES),
        "confusion": [[int(v) for v in row] for row in matrix],
        "n_low_confidence": sum(1 for row in rows if row.get("low_confidence")),
    }
    if args.patch_predictions:
        patch_rows = io_utils.read_jsonl(args.patch_predictions)
        if patch_rows:
            _match_truths(patch_rows, truths_map, args.patch_predictions)
            patch_pred = [int(np.argmax(row["distribution"]))
                          for row in patch_rows]
            patch_truth = [truths_map[row["image_id"]] for row in patch_rows]
            metrics["patch_accuracy"] = evaluation.accuracy(
                patch_pred, patch_truth)
            metrics["n_patches"] = len(patch_rows)
    if args.confusion_csv:
        io_utils.write_confusion_csv(args.confusion_csv, matrix,
                                     data.EPOCH_NAMES)
    io_utils.write_json(args.out, metrics)
    print(f"accuracy {metrics['accuracy']:.4f} over {metrics['n_images']} "
          f"images (zero rule {metrics['zero_rule_baseline']:.4f})")
    return 0


def cmd_inspect(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo("inspect", args, cfg)
    patch_rows = io_utils.read_jsonl(args.patch_predictions)
    if not patch_rows:
        raise EmptyInputError(f"{args.patch_predictions} is empty")
    truths_map = _truth_by_image(Path(args.manifest))
    _match_truths(patch_rows, truths_map, args.patch_predictions)

    records = []
    for row in patch_rows:
        patch_id = f"{row['image_id']}:{row['x']}:{row['y']}:{row['side']}"
        records.append((patch_id, truths_map[row["image_id"]],
                        np.asarray(row["distribution"])))
    confident = evaluation.rank_confident_patches(records, args.top_n)
    uncertain = evaluation.rank_uncertain_patches(records, args.top_n)

    out_rows = [("confident", rank + 1, patch_id, repr(score))
                for rank, (patch_id, score) in enumerate(confident)]
    out_rows += [("uncertain", rank + 1, patch_id, repr(score))
                 for rank, (patch_id, score) in enumerate(uncertain)]
    io_utils._write_csv(args.out, ("kind", "rank", "patch_id", "score"), out_rows)
    for kind, rank, patch_id, score in out_rows:
        print(f"{kind:9s} #{rank:<3d} {patch_id} score={score}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="buildage",
                     description="Patch-based building age estimation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=False):
        p.add_argument("--config", default=None,
                       help="JSON config file (defaults apply otherwise)")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed override")
        if threads:
            p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--clutter-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="mine, score, and select patches")
    common(p, threads=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None, choices=data.SPLIT_NAMES)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-relevance",
                       help="train the 13-class patch relevance filter")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="models directory")
    p.add_argument("--patch-labels", default=None,
                   help="patch label CSV (otherwise synthetic masks are used)")
    p.set_defaults(func=cmd_train_relevance)

    p = sub.add_parser("train-epoch", help="train the epoch classifier ensemble")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--patches", required=True,
                   help="selected-patch CSV from extract")
    p.add_argument("--relevance-model", default=None)
    p.add_argument("--out", required=True, help="models directory")
    p.set_defaults(func=cmd_train_epoch)

    p = sub.add_parser("predict", help="predict epochs for manifest images")
    common(p, threads=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True, help="models directory")
    p.add_argument("--out", required=True, help="predictions JSON-lines file")
    p.add_argument("--patch-out", default=None,
                   help="also write per-patch distributions (JSON lines)")
    p.add_argument("--split", default="test", choices=data.SPLIT_NAMES)
    p.add_argument("--no-relevance-filter", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against a manifest")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="metrics JSON file")
    p.add_argument("--confusion-csv", default=None)
    p.add_argument("--patch-predictions", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect",
                       help="rank most confident and most uncertain patches")
    common(p)
    p.add_argument("--patch-predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="ranking CSV file")
    p.add_argument("--top-n", type=int, default=10)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
