"""Image loading, grayscale conversion, bilinear resampling, augmentation.

All images are numpy arrays: RGB uint8 with shape (H, W, 3), grayscale
float64 in [0, 1] with shape (H, W). Geometric resampling is bilinear with
corner-aligned sampling, so resizing to the same size is a pixel-exact
identity. Photometric steps run in float64 and round once at the end.
"""

import io as _io
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, IoError

# BT.601 luma weights on 8-bit RGB, divided by 255 to land in [0, 1].
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# (low, high) bounds for each sampled augmentation parameter.
CROP_FRACTION_RANGE = (0.8, 1.0)
SCALE_FACTOR_RANGE = (0.9, 1.1)
BRIGHTNESS_SHIFT_RANGE = (-32.0, 32.0)
CONTRAST_GAIN_RANGE = (0.75, 1.25)
SATURATION_GAIN_RANGE = (0.75, 1.25)

_MID_GRAY = 128.0


def load_image(path) -> np.ndarray:
    """Read an image file as an RGB uint8 array of shape (H, W, 3).

    Grayscale and palette files are expanded to three channels. Raises
    IoError when the file cannot be accessed and DecodeError when it is
    not a decodable image (including truncated files).
    """
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DecodeError(f"not a decodable image: {path}") from exc
    except FileNotFoundError as exc:
        raise IoError(f"no such file: {path}") from exc
    except (IsADirectoryError, PermissionError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except OSError as exc:
        # Pillow raises plain OSError for truncated or corrupt payloads.
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DecodeError(f"unexpected shape {arr.shape} decoding {path}")
    return arr


def save_image_png(path, image: np.ndarray) -> None:
    """Write an RGB or single-channel uint8 array as a PNG, atomically."""
    from .io_utils import atomic_write_bytes

    if image.dtype != np.uint8:
        raise ValueError("expected a uint8 array")
    mode = "L" if image.ndim == 2 else "RGB"
    buf = _io.BytesIO()
    Image.fromarray(image, mode=mode).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """BT.601 luma of RGB uint8 pixels, as float64 in [0, 1].

    Accepts a single (H, W, 3) image or any batch (..., 3) of RGB values.
    """
    if image.ndim < 2 or image.shape[-1] != 3:
        raise ValueError(f"expected trailing RGB channel axis, got {image.shape}")
    r, g, b = LUMA_WEIGHTS
    f = image.astype(np.float64)
    luma = (f[..., 0] * r + f[..., 1] * g + f[..., 2] * b) / 255.0
    return np.clip(luma, 0.0, 1.0)


def _axis_coords(n_out: int, n_in: int) -> np.ndarray:
    """Corner-aligned source coordinates for resampling one axis."""
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _bilinear_gather(stack: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a batch of images at per-image float coordinates.

    stack: (N, H, W, C) float64. ys: (N, H_out), xs: (N, W_out), already
    inside [0, H-1] / [0, W-1]. Returns (N, H_out, W_out, C) float64.
    """
    n, h, w, _ = stack.shape
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, :, None, None]
    fx = (xs - x0)[:, None, :, None]

    # Separable: gather whole rows (contiguous, cheap), blend vertically,
    # then gather pixels along x from the much smaller band.
    rows = np.arange(n)[:, None]
    band = stack[rows, y0] * (1.0 - fy) + stack[rows, y1] * fy
    cols = rows[:, :, None]
    mids = np.arange(band.shape[1])[None, :, None]
    left = band[cols, mids, x0[:, None, :]]
    right = band[cols, mids, x1[:, None, :]]
    return left * (1.0 - fx) + right * fx


def resize_bilinear(patch: np.ndarray, side: int) -> np.ndarray:
    """Resize an RGB uint8 patch to side x side (corner-aligned bilinear)."""
    if patch.ndim != 3:
        raise ValueError("expected (H, W, C)")
    return resize_batch(patch[None], side)[0]


def resize_batch(stack: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Resize a batch (N, H, W, C) of uint8 patches to (N, out_h, out_w, C)."""
    if out_w is None:
        out_w = out_h
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be >= 1")
    n, h, w, _ = stack.shape
    if h == out_h and w == out_w:
        return stack.copy()
    ys = np.broadcast_to(_axis_coords(out_h, h), (n, out_h))
    xs = np.broadcast_to(_axis_coords(out_w, w), (n, out_w))
    out = _bilinear_gather(stack.astype(np.float64), ys, xs)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class AugmentParams:
    """One sampled set of augmentation knobs; defaults are the identity."""

    flip_horizontal: bool = False
    crop_fraction: float = 1.0
    scale_factor: float = 1.0
    brightness_shift: float = 0.0
    contrast_gain: float = 1.0
    saturation_gain: float = 1.0

    def __post_init__(self):
        for name, value, (lo, hi) in (
            ("crop_fraction", self.crop_fraction, CROP_FRACTION_RANGE),
            ("scale_factor", self.scale_factor, SCALE_FACTOR_RANGE),
            ("brightness_shift", self.brightness_shift, BRIGHTNESS_SHIFT_RANGE),
            ("contrast_gain", self.contrast_gain, CONTRAST_GAIN_RANGE),
            ("saturation_gain", self.saturation_gain, SATURATION_GAIN_RANGE),
        ):
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    """Draw one augmentation parameter set; flip is a fair coin."""
    batch = sample_augment_params_batch(rng, 1)
    return _params_at(batch, 0)


def sample_augment_params_batch(rng: np.random.Generator, n: int) -> dict:
    """Draw n parameter sets as arrays (vectorized form of sample_augment_params)."""
    return {
        "flip_horizontal": rng.random(n) < 0.5,
        "crop_fraction": rng.uniform(*CROP_FRACTION_RANGE, n),
        "scale_factor": rng.uniform(*SCALE_FACTOR_RANGE, n),
        "brightness_shift": rng.uniform(*BRIGHTNESS_SHIFT_RANGE, n),
        "contrast_gain": rng.uniform(*CONTRAST_GAIN_RANGE, n),
        "saturation_gain": rng.uniform(*SATURATION_GAIN_RANGE, n),
    }


def _params_at(batch: dict, i: int) -> AugmentParams:
    return AugmentParams(
        flip_horizontal=bool(batch["flip_horizontal"][i]),
        crop_fraction=float(batch["crop_fraction"][i]),
        scale_factor=float(batch["scale_factor"][i]),
        brightness_shift=float(batch["brightness_shift"][i]),
        contrast_gain=float(batch["contrast_gain"][i]),
        saturation_gain=float(batch["saturation_gain"][i]),
    )


def _augment_axis_grid(n: int, crop_fraction: np.ndarray, scale_factor: np.ndarray,
                       size: int) -> np.ndarray:
    """Source coordinates along one axis for crop + scale, shape (n, size).

    The central crop of crop_fraction resized back to size and the zoom by
    scale_factor about the center compose into a single linear map, so the
    whole geometric step costs one resampling pass. Out-of-range coordinates
    from zooming out clamp to the border (edge replication).
    """
    crop_side = np.maximum(1, np.rint(size * crop_fraction)).astype(np.intp)
    top = (size - crop_side) // 2
    # Crop window resized back: k -> top + k * (crop_side - 1) / (size - 1).
    if size == 1:
        base = np.zeros((n, 1)) + top[:, None]
    else:
        step = (crop_side - 1) / (size - 1)
        base = top[:, None] + np.arange(size)[None, :] * step[:, None]
    center = (size - 1) / 2.0
    coords = center + (base - center) / scale_factor[:, None]
    return np.clip(coords, 0.0, size - 1.0)


def augment(patch: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply flip, crop, scale, brightness, contrast, saturation in order.

    The output has the same shape and dtype as the input. Identity
    parameters reproduce the input exactly.
    """
    batch = {
        "flip_horizontal": np.array([params.flip_horizontal]),
        "crop_fraction": np.array([params.crop_fraction]),
        "scale_factor": np.array([params.scale_factor]),
        "brightness_shift": np.array([params.brightness_shift]),
        "contrast_gain": np.array([params.contrast_gain]),
        "saturation_gain": np.array([params.saturation_gain]),
    }
    return augment_batch(patch[None], batch)[0]


def augment_batch(patches: np.ndarray, params: dict) -> np.ndarray:
    """Vectorized augment over a uint8 batch (N, H, W, 3).

    params holds per-patch arrays as produced by sample_augment_params_batch.
    Bitwise identical to applying augment patch by patch.
    """
    if patches.ndim != 4 or patches.shape[3] != 3:
        raise ValueError(f"expected (N, H, W, 3), got {patches.shape}")
    n, h, w, _ = patches.shape
    f = patches.astype(np.float64)

    flip = params["flip_horizontal"]
    if np.any(flip):
        f[flip] = f[flip, :, ::-1]

    ys = _augment_axis_grid(n, params["crop_fraction"], params["scale_factor"], h)
    xs = _augment_axis_grid(n, params["crop_fraction"], params["scale_factor"], w)
    f = _bilinear_gather(f, ys, xs)

    f += params["brightness_shift"][:, None, None, None]
    gain = params["contrast_gain"][:, None, None, None]
    f = _MID_GRAY + gain * (f - _MID_GRAY)
    r, g, b = LUMA_WEIGHTS
    luma = f[..., 0] * r + f[..., 1] * g + f[..., 2] * b
    sat = params["saturation_gain"][:, None, None, None]
    f = luma[..., None] + sat * (f - luma[..., None])

    return np.clip(np.rint(f), 0, 255).astype(np.uint8)
