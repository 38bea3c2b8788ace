#!/usr/bin/env python3
"""Run the full synthetic benchmark and print per-stage timings.

Defaults reproduce the acceptance benchmark: 6 classes x 100 images at
96x96, seed 42, stock selection/fusion settings, learning rate 0.05.
Artifacts (corpus, features, models, predictions, metrics) are left in
--out-dir so they can be inspected or re-fused afterwards.
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from buildage import cli  # noqa: E402


def run_stage(name, argv, timings):
    t0 = time.perf_counter()
    rc = cli.main(argv)
    timings[name] = time.perf_counter() - t0
    if rc != 0:
        sys.exit(f"{name} failed with exit code {rc}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="benchmark_run")
    ap.add_argument("--n-per-class", type=int, default=100)
    ap.add_argument("--image-size", type=int, default=96)
    ap.add_argument("--clutter-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--learning-rate", type=float, default=0.05)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    root = Path(args.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    config = root / "config.json"
    config.write_text(json.dumps({
        "seed": args.seed,
        "relevance_train": {"learning_rate": args.learning_rate,
                            "epochs": args.epochs},
        "epoch_train": {"learning_rate": args.learning_rate,
                        "epochs": args.epochs},
    }, indent=2))

    corpus = root / "corpus"
    manifest = corpus / "manifest.csv"
    feats, models, out = root / "feats", root / "models", root / "out"
    timings: dict[str, float] = {}

    run_stage("synth", [
        "synth", "--config", str(config), "--out", str(corpus),
        "--n-per-class", str(args.n_per_class),
        "--image-size", str(args.image_size),
        "--clutter-fraction", str(args.clutter_fraction)], timings)
    run_stage("extract", [
        "extract", "--config", str(config), "--manifest", str(manifest),
        "--out", str(feats), "--split", "train",
        "--threads", str(args.threads)], timings)
    run_stage("train-relevance", [
        "train-relevance", "--config", str(config), "--manifest",
        str(manifest), "--out", str(models)], timings)
    run_stage("train-epoch", [
        "train-epoch", "--config", str(config), "--manifest", str(manifest),
        "--patches", str(feats / "patches_train.csv"),
        "--relevance-model", str(models / "relevance.model"),
        "--out", str(models)], timings)
    run_stage("predict", [
        "predict", "--config", str(config), "--manifest", str(manifest),
        "--models", str(models), "--out", str(out / "predictions.jsonl"),
        "--patch-out", str(out / "patches.jsonl"),
        "--threads", str(args.threads)], timings)
    run_stage("evaluate", [
        "evaluate", "--config", str(config),
        "--predictions", str(out / "predictions.jsonl"),
        "--manifest", str(manifest), "--out", str(out / "metrics.json"),
        "--confusion-csv", str(out / "confusion.csv"),
        "--patch-predictions", str(out / "patches.jsonl")], timings)

    metrics = json.loads((out / "metrics.json").read_text())
    print()
    for name, seconds in timings.items():
        print(f"{name:16s} {seconds:8.1f}s")
    print(f"{'total':16s} {sum(timings.values()):8.1f}s")
    print()
    print(f"image accuracy  {metrics['accuracy']:.4f}  "
          f"(zero rule {metrics['zero_rule_baseline']:.4f})")
    if "patch_accuracy" in metrics:
        print(f"patch accuracy  {metrics['patch_accuracy']:.4f}  "
              f"over {metrics['n_patches']} patches")
    print(f"low confidence  {metrics['n_low_confidence']}/{metrics['n_images']}")


if __name__ == "__main__":
    main()
