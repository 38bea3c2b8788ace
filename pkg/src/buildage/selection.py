"""Patch selection: top-contrast ranking and per-image descriptor clustering.

Two strategies mine the informative patches of an image. "high_contrast"
keeps the top t percent of patches by contrast score directly.
"high_contrast_clusters" first clusters the normalized descriptors of the
image's patches into k groups, keeps the single patch nearest each
centroid (one representative per visual structure), and only then ranks
those representatives by contrast. The cluster route trades a little
contrast for diversity and resists near-duplicate patches.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError

STRATEGY_HIGH_CONTRAST = "high_contrast"
STRATEGY_CLUSTERS = "high_contrast_clusters"
STRATEGIES = (STRATEGY_HIGH_CONTRAST, STRATEGY_CLUSTERS)

DEFAULT_K = 50
DEFAULT_MAX_ITER = 100


@dataclass(frozen=True)
class SelectionConfig:
    strategy: str = STRATEGY_CLUSTERS
    t_percent: float = 21.0
    k: int = DEFAULT_K
    seed: int = 0
    max_iter: int = DEFAULT_MAX_ITER
    # high_contrast only: rank within each image (True) or pool scores
    # across the corpus before ranking (False).
    per_image: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.t_percent <= 100.0:
            raise ValueError(f"t_percent must be in (0, 100], got {self.t_percent}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


def top_contrast_count(n: int, t_percent: float) -> int:
    """ceil(n * t_percent / 100), guarded against float error at integers."""
    return max(1, math.ceil(n * t_percent / 100.0 - 1e-9))


def select_top_contrast(scores: np.ndarray, t_percent: float) -> np.ndarray:
    """Indices of the top t percent by score, highest first.

    Ties keep input order, so selection is deterministic for equal scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if n == 0:
        raise EmptyInputError("no patches to select from")
    keep = top_contrast_count(n, t_percent)
    order = np.lexsort((np.arange(n), -scores))
    return order[:keep]


@dataclass
class ClusteringResult:
    centroids: np.ndarray     # (k, d)
    assignments: np.ndarray   # (n,) int
    cost: float               # sum of squared distances to assigned centroid
    cost_history: list[float]  # cost after every assignment step
    n_iter: int


def _pairwise_sq(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    p2 = np.sum(points ** 2, axis=1)[:, None]
    c2 = np.sum(centroids ** 2, axis=1)[None, :]
    return np.maximum(p2 + c2 - 2.0 * points @ centroids.T, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ initialization: D^2-weighted center choices."""
    n = points.shape[0]
    centers = [int(rng.integers(n))]
    d2 = np.sum((points - points[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[centers].copy()


def kmeans(points: np.ndarray, k: int, seed: int,
           max_iter: int = DEFAULT_MAX_ITER) -> ClusteringResult:
    """Lloyd's algorithm with k-means++ seeding.

    k is lowered to n when there are fewer points than clusters. Empty
    clusters are reseeded with the point currently farthest from its
    centroid. Runs until the assignment reaches a fixpoint or max_iter
    passes; the cost after each assignment step is recorded and asserted
    to be non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise EmptyInputError("kmeans needs a non-empty (n, d) array")
    n = points.shape[0]
    k = min(k, n)
    if k < 1:
        raise ValueError("k must be >= 1")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    d2 = _pairwise_sq(points, centroids)
    assignments = d2.argmin(axis=1)
    cost = float(d2[np.arange(n), assignments].sum())
    history = [cost]

    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        # Update step: means of each cluster; reseed empties with the
        # farthest point so no centroid is ever dangling.
        counts = np.bincount(assignments, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignments, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            current = d2[np.arange(n), assignments]
            farthest = np.argsort(-current)
            for slot, empty_idx in enumerate(np.flatnonzero(~nonempty)):
                centroids[empty_idx] = points[farthest[slot % n]]

        d2 = _pairwise_sq(points, centroids)
        new_assignments = d2.argmin(axis=1)
        new_cost = float(d2[np.arange(n), new_assignments].sum())
        assert new_cost <= cost * (1.0 + 1e-12) + 1e-12, \
            f"kmeans cost increased: {cost} -> {new_cost}"
        history.append(new_cost)
        converged = bool(np.array_equal(new_assignments, assignments))
        assignments, cost = new_assignments, new_cost
        if converged:
            break
    return ClusteringResult(centroids, assignments, cost, history, n_iter)


def cluster_representatives(descriptors_norm: np.ndarray, k: int, seed: int,
                            max_iter: int = DEFAULT_MAX_ITER) -> tuple[np.ndarray, ClusteringResult]:
    """One representative patch index per non-empty cluster.

    The representative is the patch whose normalized descriptor is closest
    to its cluster centroid; ties take the lowest index. Returns indices
    ordered by cluster id, plus the clustering itself.
    """
    result = kmeans(descriptors_norm, k, seed, max_iter)
    d2 = _pairwise_sq(descriptors_norm, result.centroids)
    reps = []
    for cluster in range(result.centroids.shape[0]):
        members = np.flatnonzero(result.assignments == cluster)
        if members.size == 0:
            continue
        reps.append(members[np.argmin(d2[members, cluster])])
    return np.array(reps, dtype=np.intp), result


@dataclass
class SelectionOutcome:
    indices: np.ndarray      # selected patch indices into the input arrays
    cluster_ids: np.ndarray  # cluster id per selected patch, -1 without clustering


def select_patches(descriptors_norm: np.ndarray, contrasts: np.ndarray,
                   config: SelectionConfig) -> SelectionOutcome:
    """Run the configured selection strategy over one image's patches."""
    contrasts = np.asarray(contrasts, dtype=np.float64)
    if contrasts.shape[0] == 0:
        raise EmptyInputError("no patches to select from")
    if config.strategy == STRATEGY_HIGH_CONTRAST:
        idx = select_top_contrast(contrasts, config.t_percent)
        return SelectionOutcome(idx, np.full(idx.shape, -1, dtype=np.intp))
    reps, result = cluster_representatives(
        descriptors_norm, config.k, config.seed, config.max_iter)
    chosen = select_top_contrast(contrasts[reps], config.t_percent)
    idx = reps[chosen]
    return SelectionOutcome(idx, result.assignments[idx])
