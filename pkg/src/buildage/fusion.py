"""Patch-to-building decision fusion.

Per-patch class distributions are first screened for ambiguity: a patch
whose top-two probability margin falls below t_u casts no vote. The
survivors are combined by majority vote over argmax classes (ties broken
by summed likelihood, then lowest class index) or by the argmax of the
mean distribution. If screening removes every patch, the prediction falls
back to the mean distribution over all patches and is flagged low
confidence with zero used patches.
"""

from dataclasses import dataclass

import numpy as np

from . import classify, descriptors, imaging, patches as patches_mod, selection as selection_mod
from .errors import EmptyInputError, NoPatchesError

AGG_MAJORITY = "majority_vote"
AGG_MEAN = "mean_likelihood"
AGGREGATIONS = (AGG_MAJORITY, AGG_MEAN)


@dataclass(frozen=True)
class FusionConfig:
    aggregation: str = AGG_MAJORITY
    t_u: float = 0.25
    drop_ambiguous: bool = True

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if not 0.0 <= self.t_u <= 1.0:
            raise ValueError(f"t_u must be in [0, 1], got {self.t_u}")


@dataclass
class BuildingPrediction:
    epoch: int
    distribution: np.ndarray  # mean over the used patch distributions
    n_patches_total: int
    n_patches_used: int
    low_confidence: bool = False


def top_two_margin(distribution: np.ndarray) -> float:
    """Gap between the largest and second-largest class probability."""
    d = np.asarray(distribution, dtype=np.float64)
    if d.shape[0] < 2:
        raise ValueError("margin needs at least two classes")
    top2 = np.partition(d, -2)[-2:]
    return float(top2[1] - top2[0])


def is_ambiguous(distribution: np.ndarray, t_u: float) -> bool:
    """True when the winning class leads by less than t_u."""
    return top_two_margin(distribution) < t_u


def _surviving_rows(dists: np.ndarray, config: FusionConfig) -> np.ndarray:
    if not config.drop_ambiguous:
        return np.arange(dists.shape[0])
    part = np.partition(dists, dists.shape[1] - 2, axis=1)
    margins = part[:, -1] - part[:, -2]
    return np.flatnonzero(margins >= config.t_u)


def _as_matrix(dists) -> np.ndarray:
    arr = np.asarray(dists, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise EmptyInputError("no patch distributions to aggregate")
    return arr


def _fallback(dists: np.ndarray) -> BuildingPrediction:
    mean = dists.mean(axis=0)
    return BuildingPrediction(
        epoch=int(mean.argmax()), distribution=mean,
        n_patches_total=dists.shape[0], n_patches_used=0,
        low_confidence=True)


def majority_vote(dists, config: FusionConfig) -> BuildingPrediction:
    """Most-voted argmax class among unambiguous patches.

    Vote ties go to the tied class with the highest summed likelihood over
    the used patches; remaining ties to the lowest class index.
    """
    dists = _as_matrix(dists)
    used = _surviving_rows(dists, config)
    if used.size == 0:
        return _fallback(dists)
    votes = dists[used].argmax(axis=1)
    counts = np.bincount(votes, minlength=dists.shape[1])
    tied = np.flatnonzero(counts == counts.max())
    if tied.size == 1:
        winner = int(tied[0])
    else:
        sums = dists[used].sum(axis=0)
        winner = int(tied[np.argmax(sums[tied])])
    return BuildingPrediction(
        epoch=winner, distribution=dists[used].mean(axis=0),
        n_patches_total=dists.shape[0], n_patches_used=int(used.size))


def mean_likelihood(dists, config: FusionConfig) -> BuildingPrediction:
    """Argmax of the mean distribution over unambiguous patches."""
    dists = _as_matrix(dists)
    used = _surviving_rows(dists, config)
    if used.size == 0:
        return _fallback(dists)
    mean = dists[used].mean(axis=0)
    return BuildingPrediction(
        epoch=int(mean.argmax()), distribution=mean,
        n_patches_total=dists.shape[0], n_patches_used=int(used.size))


def aggregate(dists, config: FusionConfig) -> BuildingPrediction:
    if config.aggregation == AGG_MAJORITY:
        return majority_vote(dists, config)
    return mean_likelihood(dists, config)


# ---------------------------------------------------------------------------
# Whole-image pipeline


@dataclass
class PatchPipelineResult:
    geometries: list            # selected (and relevance-surviving) patches
    distributions: np.ndarray   # (N, n_classes) per-patch ensemble outputs
    n_candidates: int           # dense grid size before selection
    relevance_fallback: bool    # filter removed everything; kept unfiltered set


def run_patch_pipeline(image: np.ndarray, image_id: str, epoch_models,
                       selection_config: selection_mod.SelectionConfig,
                       patch_config: patches_mod.PatchConfig = patches_mod.PatchConfig(),
                       relevance_model=None,
                       feature_side: int = classify.FEATURE_PATCH_SIDE) -> PatchPipelineResult:
    """Mine, select, filter, and classify the patches of one image.

    Descriptors for contrast and clustering are computed on the grayscale
    image at native patch scale; classifier features are computed on the
    selected patches rescaled to feature_side. Patch order is canonical
    (scale, then y, then x) so results do not depend on evaluation order.
    """
    height, width = image.shape[:2]
    geometries = patches_mod.sample_grid(
        width, height, patch_config.sides, patch_config.overlap)
    if not geometries:
        raise NoPatchesError(
            f"image {image_id or '<array>'} ({width}x{height}) yields no "
            f"patches at sides {patch_config.sides}")
    gray = imaging.to_grayscale(image)

    raw = np.zeros((len(geometries), descriptors.DESCRIPTOR_SIZE))
    row = 0
    for scale_index, side in enumerate(patch_config.sides):
        stride = patches_mod.grid_stride(side, patch_config.overlap)
        ys = patches_mod.axis_positions(height, side, stride)
        xs = patches_mod.axis_positions(width, side, stride)
        if len(ys) == 0 or len(xs) == 0:
            continue
        windows = np.lib.stride_tricks.sliding_window_view(gray, (side, side))
        block = windows[::stride, ::stride].reshape(-1, side, side)
        raw[row:row + block.shape[0]] = descriptors.sift_descriptors(block)
        row += block.shape[0]

    contrasts = descriptors.contrast_scores(raw)
    normalized, _ = descriptors.normalize_rows(raw)
    outcome = selection_mod.select_patches(normalized, contrasts, selection_config)
    chosen = np.sort(outcome.indices)

    pixels = [patches_mod.extract(image, geometries[i]).pixels for i in chosen]
    features = classify.featurize_batch(pixels, feature_side)

    fallback = False
    if relevance_model is not None:
        keep = classify.relevance_keep_mask(relevance_model, features)
        if keep.any():
            chosen = chosen[keep]
            features = features[keep]
        else:
            fallback = True

    dists = classify.ensemble_predict_batch(epoch_models, features)
    return PatchPipelineResult(
        geometries=[geometries[i] for i in chosen],
        distributions=dists,
        n_candidates=len(geometries),
        relevance_fallback=fallback)


def predict_building(image: np.ndarray, image_id: str, epoch_models,
                     fusion_config: FusionConfig,
                     selection_config: selection_mod.SelectionConfig,
                     patch_config: patches_mod.PatchConfig = patches_mod.PatchConfig(),
                     relevance_model=None,
                     feature_side: int = classify.FEATURE_PATCH_SIDE) -> BuildingPrediction:
    """Full single-image prediction: pipeline plus decision fusion."""
    result = run_patch_pipeline(
        image, image_id, epoch_models, selection_config, patch_config,
        relevance_model, feature_side)
    prediction = aggregate(result.distributions, fusion_config)
    if result.relevance_fallback:
        prediction.low_confidence = True
    return prediction
