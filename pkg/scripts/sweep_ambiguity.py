#!/usr/bin/env python3
"""Re-fuse saved per-patch predictions across a sweep of t_u values.

Reads the patches.jsonl written by `predict --patch-out` plus the manifest
for ground truth, then reports image accuracy, mean patches used, and the
number of low-confidence fallbacks at each ambiguity threshold. No model
is re-run, so the sweep is instant compared to the pipeline itself.

    python3 scripts/sweep_ambiguity.py benchmark_run/out/patches.jsonl \
        benchmark_run/corpus/manifest.csv
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from buildage import data, fusion, io_utils  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("patch_predictions")
    ap.add_argument("manifest")
    ap.add_argument("--steps", type=int, default=21)
    args = ap.parse_args()

    rows = io_utils.read_jsonl(args.patch_predictions)
    truths = {r.image_path: data.epoch_of_year(r.yoc)
              for r in data.read_manifest(args.manifest)}
    by_image: dict[str, list] = {}
    for row in rows:
        by_image.setdefault(row["image_id"], []).append(row["distribution"])
    images = [(np.asarray(dists), truths[image_id])
              for image_id, dists in by_image.items()]
    if not images:
        sys.exit("no patch predictions found")

    print(f"{len(images)} images, "
          f"{sum(d.shape[0] for d, _ in images)} patch predictions")
    print(f"{'t_u':>5s} {'accuracy':>9s} {'mean used':>10s} {'fallbacks':>10s}")
    for t_u in np.linspace(0.0, 1.0, args.steps):
        config = fusion.FusionConfig(t_u=float(t_u))
        hits = used = fallbacks = 0
        for dists, truth in images:
            prediction = fusion.majority_vote(dists, config)
            hits += prediction.epoch == truth
            used += prediction.n_patches_used
            fallbacks += prediction.low_confidence
        print(f"{t_u:5.2f} {hits / len(images):9.4f} "
              f"{used / len(images):10.2f} {fallbacks:10d}")


if __name__ == "__main__":
    main()
