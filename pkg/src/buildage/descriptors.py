"""Dense upright SIFT descriptors, contrast scores, and normalization.

One 128-dimensional descriptor summarizes a whole grayscale patch:
gradient magnitudes, weighted by a centered Gaussian, are distributed by
trilinear interpolation into a 4x4 spatial grid of 8-bin orientation
histograms. No rotation normalization is applied; the descriptor is kept
"upright" so that absolute edge orientations stay discriminative.

The unnormalized descriptor's L2 norm doubles as the patch contrast score,
which is why normalization state is tracked explicitly.
"""

import functools
from dataclasses import dataclass

import numpy as np

from .errors import NormalizedInputError, PatchTooSmallError

SPATIAL_BINS = 4
ORIENTATION_BINS = 8
DESCRIPTOR_SIZE = SPATIAL_BINS * SPATIAL_BINS * ORIENTATION_BINS  # 128
MIN_PATCH_SIDE = 4


@dataclass(frozen=True)
class DescriptorParams:
    """Descriptor constants, recorded here so runs can audit them.

    sigma_factor scales the Gaussian spatial weighting window: sigma =
    side * sigma_factor. gaussian_weighting=False disables the window
    (every pixel contributes with plain gradient magnitude).
    """

    clip_threshold: float = 0.2
    sigma_factor: float = 0.5
    gaussian_weighting: bool = True


DEFAULT_PARAMS = DescriptorParams()


@dataclass(frozen=True, eq=False)
class SiftDescriptor:
    values: np.ndarray  # (128,) float64
    normalized: bool = False
    low_contrast: bool = False


@functools.lru_cache(maxsize=128)
def _spatial_bins(side: int) -> tuple:
    """Per-pixel (bin0, frac) along one axis, mass-conserving at the edges.

    Pixel centers map to bin coordinates in [-0.5, SPATIAL_BINS - 0.5];
    clipping into [0, SPATIAL_BINS - 1] folds boundary mass onto the
    nearest valid bin instead of dropping it.
    """
    u = (np.arange(side) + 0.5) * (SPATIAL_BINS / side) - 0.5
    u = np.clip(u, 0.0, SPATIAL_BINS - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.intp), SPATIAL_BINS - 2)
    frac = u - i0
    return i0, frac


@functools.lru_cache(maxsize=128)
def _gaussian_window(side: int, sigma_factor: float) -> np.ndarray:
    center = (side - 1) / 2.0
    sigma = side * sigma_factor
    d = np.arange(side) - center
    d2 = d[:, None] ** 2 + d[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def sift_descriptors(stack: np.ndarray,
                     params: DescriptorParams = DEFAULT_PARAMS) -> np.ndarray:
    """Batch descriptor kernel: (N, S, S) grayscale float -> (N, 128).

    Gradients are central differences with replicated borders; orientation
    is atan2(gy, gx) split linearly between the two nearest of eight bins
    centered at k * 45 degrees (wrapping), and spatial mass is split
    bilinearly between the two nearest grid cells per axis.
    """
    if stack.ndim != 3:
        raise ValueError(f"expected (N, S, S), got {stack.shape}")
    n, h, w = stack.shape
    if h < MIN_PATCH_SIDE or w < MIN_PATCH_SIDE:
        raise PatchTooSmallError(
            f"patch {h}x{w} below minimum side {MIN_PATCH_SIDE}")
    if h != w:
        raise ValueError("patches must be square")
    side = h

    out = np.zeros(n * DESCRIPTOR_SIZE)
    # Keep per-chunk temporaries around a few million elements.
    chunk = max(1, 2_000_000 // (side * side))
    for start in range(0, n, chunk):
        block = np.asarray(stack[start:start + chunk], dtype=np.float64)
        out[start * DESCRIPTOR_SIZE:(start + block.shape[0]) * DESCRIPTOR_SIZE] = \
            _descriptor_block(block, side, params)
    return out.reshape(n, DESCRIPTOR_SIZE)


def _descriptor_block(block: np.ndarray, side: int,
                      params: DescriptorParams) -> np.ndarray:
    n = block.shape[0]
    padded = np.pad(block, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = 0.5 * (padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2])
    gy = 0.5 * (padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1])
    mag = np.hypot(gx, gy)
    if params.gaussian_weighting:
        mag = mag * _gaussian_window(side, params.sigma_factor)[None]

    ori = np.arctan2(gy, gx) * (ORIENTATION_BINS / (2.0 * np.pi))
    ori = np.mod(ori, ORIENTATION_BINS)
    # mod of a tiny negative can round up to the modulus itself.
    ori[ori >= ORIENTATION_BINS] = 0.0
    j0 = ori.astype(np.intp)
    fo = ori - j0
    j1 = (j0 + 1) % ORIENTATION_BINS

    iy0, fy = _spatial_bins(side)
    ix0, fx = _spatial_bins(side)
    wy = (1.0 - fy, fy)
    wx = (1.0 - fx, fx)

    offsets = (np.arange(n) * DESCRIPTOR_SIZE)[:, None, None]
    total = np.zeros(n * DESCRIPTOR_SIZE)
    for a in (0, 1):
        iy = iy0 + a
        for b in (0, 1):
            ix = ix0 + b
            cell = ((iy[:, None] * SPATIAL_BINS + ix[None, :])
                    * ORIENTATION_BINS)
            wcell = wy[a][:, None] * wx[b][None, :]
            for j, wo in ((j0, 1.0 - fo), (j1, fo)):
                idx = offsets + cell[None] + j
                weights = mag * wcell[None] * wo
                total += np.bincount(idx.ravel(), weights=weights.ravel(),
                                     minlength=n * DESCRIPTOR_SIZE)
    return total


def sift_descriptor(patch: np.ndarray,
                    params: DescriptorParams = DEFAULT_PARAMS) -> SiftDescriptor:
    """Descriptor of a single grayscale patch (float array, side >= 4)."""
    if patch.ndim != 2:
        raise ValueError(f"expected a 2-d grayscale patch, got {patch.shape}")
    values = sift_descriptors(patch[None], params)[0]
    return SiftDescriptor(values, normalized=False)


def contrast_score(descriptor: SiftDescriptor) -> float:
    """L2 norm of an unnormalized descriptor; the patch contrast measure."""
    if descriptor.normalized:
        raise NormalizedInputError(
            "contrast is defined on unnormalized descriptors only")
    return float(np.linalg.norm(descriptor.values))


def contrast_scores(values: np.ndarray) -> np.ndarray:
    """Row-wise contrast for a (N, 128) block of unnormalized descriptors."""
    return np.linalg.norm(values, axis=1)


def normalize_rows(values: np.ndarray,
                   params: DescriptorParams = DEFAULT_PARAMS) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize, clip at the threshold, re-L2-normalize, row-wise.

    Returns (normalized (N, 128), low_contrast mask (N,)); all-zero rows
    stay zero and are flagged low-contrast.
    """
    norms = np.linalg.norm(values, axis=1)
    low = norms == 0.0
    safe = np.where(low, 1.0, norms)
    out = values / safe[:, None]
    np.clip(out, None, params.clip_threshold, out=out)
    renorms = np.linalg.norm(out, axis=1)
    safe2 = np.where(renorms == 0.0, 1.0, renorms)
    out /= safe2[:, None]
    out[low] = 0.0
    return out, low


def normalize_descriptor(descriptor: SiftDescriptor,
                         params: DescriptorParams = DEFAULT_PARAMS) -> SiftDescriptor:
    """Normalized copy of a descriptor (see normalize_rows)."""
    values, low = normalize_rows(descriptor.values[None], params)
    return SiftDescriptor(values[0], normalized=True, low_contrast=bool(low[0]))
