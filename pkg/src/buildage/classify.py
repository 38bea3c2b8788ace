"""Patch featurization, shallow softmax classifiers, and ensembling.

Features are 176-dimensional: the normalized 128-value SIFT descriptor of
the patch rescaled to 64x64, concatenated with a 16-bin color histogram
per RGB channel (each histogram L1-normalized). Two architectures share
one training loop: a linear softmax layer and a one-hidden-layer ReLU
network. Training is plain minibatch SGD with classical momentum and L2
weight decay on the weight matrices (never on biases).

A 13-class instance of the same machinery acts as the relevance filter:
class 0 is "building" and a patch survives only if that class wins.
"""

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import descriptors, imaging
from .errors import (
    DecodeError,
    DegenerateDatasetError,
    EmptyInputError,
    IoError,
    LengthMismatchError,
    PipelineError,
    ShapeMismatchError,
    WrongClassCountError,
)

RELEVANCE_CLASSES = (
    "building", "cars", "people", "trees", "grass", "asphalt", "poles",
    "sunblind", "furniture", "fence", "firewood", "sign", "miscellaneous",
)
BUILDING_CLASS = 0

COLOR_BINS = 16
FEATURE_PATCH_SIDE = 64
FEATURE_DIM = descriptors.DESCRIPTOR_SIZE + 3 * COLOR_BINS  # 176

ARCH_LINEAR = "linear_softmax"
ARCH_MLP = "mlp_1hidden"
ARCHITECTURES = (ARCH_LINEAR, ARCH_MLP)

DEFAULT_HIDDEN_UNITS = 64


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 256
    epochs: int = 20
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class ClassifierModel:
    architecture: str
    n_classes: int
    feature_dim: int
    hidden_units: int  # 0 for the linear architecture
    params: dict[str, np.ndarray]
    rng_seed: int = 0
    train_config: TrainConfig | None = None


@dataclass
class TrainResult:
    model: ClassifierModel
    epoch_losses: list[float]


# ---------------------------------------------------------------------------
# Features


def color_histograms(batch: np.ndarray) -> np.ndarray:
    """Per-channel 16-bin histograms of uint8 RGB patches, L1-normalized.

    batch: (N, S, S, 3) uint8 -> (N, 48) float64. Bin b covers values
    [16*b, 16*b + 15], so mid-gray 128 lands in bin 8.
    """
    n, h, w, _ = batch.shape
    bins = (batch >> 4).astype(np.intp)
    offset = (np.arange(n) * 3 * COLOR_BINS)[:, None, None, None]
    channel = (np.arange(3) * COLOR_BINS)[None, None, None, :]
    idx = bins + channel + offset
    counts = np.bincount(idx.ravel(), minlength=n * 3 * COLOR_BINS)
    return counts.reshape(n, 3 * COLOR_BINS).astype(np.float64) / (h * w)


def featurize(patch: np.ndarray,
              feature_side: int = FEATURE_PATCH_SIDE) -> np.ndarray:
    """Feature vector of one RGB uint8 patch: 128 SIFT + 48 color values."""
    return featurize_batch([patch], feature_side)[0]


def featurize_batch(patches, feature_side: int = FEATURE_PATCH_SIDE) -> np.ndarray:
    """Featurize a sequence (or (N, S, S, 3) array) of RGB uint8 patches.

    Mixed patch sizes are rescaled to feature_side x feature_side first;
    size groups are batched through the descriptor kernel for speed.
    """
    stack = stack_resized(patches, feature_side)
    if stack.shape[0] == 0:
        return np.zeros((0, FEATURE_DIM))
    gray = imaging.to_grayscale(stack)
    sift = descriptors.sift_descriptors(gray)
    sift, _ = descriptors.normalize_rows(sift)
    color = color_histograms(stack)
    return np.concatenate([sift, color], axis=1)


def stack_resized(patches, side: int) -> np.ndarray:
    """Resize patches of possibly mixed sizes into one (N, side, side, 3) stack."""
    if isinstance(patches, np.ndarray) and patches.ndim == 4:
        return imaging.resize_batch(patches, side)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, p in enumerate(patches):
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeMismatchError(f"patch {i} has shape {p.shape}")
        groups.setdefault(p.shape[:2], []).append(i)
    out = np.zeros((len(patches), side, side, 3), dtype=np.uint8)
    for shape, indices in groups.items():
        block = np.stack([patches[i] for i in indices])
        out[indices] = imaging.resize_batch(block, side)
    return out


# ---------------------------------------------------------------------------
# Model math


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically safe softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in))


def init_model(arch: str, feature_dim: int, n_classes: int,
               hidden_units: int, seed: int) -> ClassifierModel:
    """Fresh model: Glorot-uniform weight matrices, zero biases."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    rng = np.random.default_rng(seed)
    if arch == ARCH_LINEAR:
        params = {
            "w": _glorot_uniform(rng, n_classes, feature_dim),
            "b": np.zeros(n_classes),
        }
        hidden_units = 0
    else:
        if hidden_units < 1:
            raise ValueError("hidden_units must be >= 1 for the MLP")
        params = {
            "w1": _glorot_uniform(rng, hidden_units, feature_dim),
            "b1": np.zeros(hidden_units),
            "w2": _glorot_uniform(rng, n_classes, hidden_units),
            "b2": np.zeros(n_classes),
        }
    return ClassifierModel(arch, n_classes, feature_dim, hidden_units,
                           params, rng_seed=seed)


def forward_logits(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    p = model.params
    if model.architecture == ARCH_LINEAR:
        return x @ p["w"].T + p["b"]
    hidden = np.maximum(x @ p["w1"].T + p["b1"], 0.0)
    return hidden @ p["w2"].T + p["b2"]


def predict(model: ClassifierModel, features: np.ndarray) -> np.ndarray:
    """Class distribution for a single feature vector."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (model.feature_dim,):
        raise ShapeMismatchError(
            f"expected ({model.feature_dim},), got {features.shape}")
    return softmax(forward_logits(model, features[None]))[0]


def predict_batch(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.feature_dim:
        raise ShapeMismatchError(
            f"expected (N, {model.feature_dim}), got {x.shape}")
    return softmax(forward_logits(model, x))


def ensemble_predict(models, features: np.ndarray) -> np.ndarray:
    """Arithmetic mean of each member's softmax distribution."""
    return ensemble_predict_batch(models, np.asarray(features)[None])[0]


def ensemble_predict_batch(models, x: np.ndarray) -> np.ndarray:
    if not models:
        raise EmptyInputError("empty ensemble")
    n_classes = models[0].n_classes
    if any(m.n_classes != n_classes for m in models):
        raise ShapeMismatchError("ensemble members disagree on class count")
    total = np.zeros((x.shape[0], n_classes))
    for m in models:
        total += predict_batch(m, x)
    return total / len(models)


def objective_and_grads(model: ClassifierModel, x: np.ndarray, y: np.ndarray,
                        weight_decay: float) -> tuple[float, float, dict]:
    """Full objective (mean CE + 0.5 * decay * sum of squared weights),
    the bare cross-entropy, and gradients of the objective w.r.t. params.

    Biases carry no decay term, matching the update rule.
    """
    p = model.params
    n = x.shape[0]
    onehot_scale = 1.0 / n

    if model.architecture == ARCH_LINEAR:
        logits = x @ p["w"].T + p["b"]
    else:
        pre = x @ p["w1"].T + p["b1"]
        hidden = np.maximum(pre, 0.0)
        logits = hidden @ p["w2"].T + p["b2"]

    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    logsumexp = m[:, 0] + np.log(np.exp(z).sum(axis=1))
    ce = float(np.mean(logsumexp - logits[np.arange(n), y]))

    probs = softmax(logits)
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= onehot_scale

    if model.architecture == ARCH_LINEAR:
        grads = {
            "w": dlogits.T @ x + weight_decay * p["w"],
            "b": dlogits.sum(axis=0),
        }
        penalty = 0.5 * weight_decay * float(np.sum(p["w"] ** 2))
    else:
        dhidden = dlogits @ p["w2"]
        dpre = dhidden * (pre > 0.0)
        grads = {
            "w1": dpre.T @ x + weight_decay * p["w1"],
            "b1": dpre.sum(axis=0),
            "w2": dlogits.T @ hidden + weight_decay * p["w2"],
            "b2": dlogits.sum(axis=0),
        }
        penalty = 0.5 * weight_decay * float(
            np.sum(p["w1"] ** 2) + np.sum(p["w2"] ** 2))
    return ce + penalty, ce, grads


# ---------------------------------------------------------------------------
# Training


def _prepare_patch_stack(inputs, feature_side: int) -> np.ndarray:
    """Resize raw pixel patches once so per-epoch augmentation skips resizing."""
    return stack_resized(inputs, feature_side)


def train(inputs, labels, arch: str, config: TrainConfig,
          n_classes: int | None = None,
          hidden_units: int = DEFAULT_HIDDEN_UNITS,
          feature_side: int = FEATURE_PATCH_SIDE) -> TrainResult:
    """Train one classifier with minibatch SGD and classical momentum.

    inputs is either a (N, D) float feature matrix or a sequence of RGB
    uint8 pixel patches. With pixel patches and config.augment on, fresh
    augmentation parameters are drawn for every presentation of every
    patch; features are recomputed from the augmented pixels. The update
    is v <- momentum * v - lr * (grad_ce + decay * w); w <- w + v, with
    biases excluded from decay. Returns the model plus the per-epoch mean
    cross-entropy trace.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n = len(labels)
    if n == 0:
        raise EmptyInputError("empty training set")
    if len(inputs) != n:
        raise LengthMismatchError(f"{len(inputs)} inputs vs {n} labels")

    distinct = np.unique(labels)
    if distinct.size < 2:
        raise DegenerateDatasetError("training needs at least two classes")
    if n_classes is None:
        n_classes = int(distinct.max()) + 1
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ShapeMismatchError(
            f"labels outside [0, {n_classes}): {labels.min()}..{labels.max()}")

    pixel_mode = not (isinstance(inputs, np.ndarray) and inputs.ndim == 2)
    if pixel_mode:
        stack = _prepare_patch_stack(inputs, feature_side)
        base_features = None if config.augment else featurize_batch(stack, feature_side)
        feature_dim = FEATURE_DIM
    else:
        base_features = np.asarray(inputs, dtype=np.float64)
        feature_dim = base_features.shape[1]

    rng = np.random.default_rng(config.seed)
    model = init_model(arch, feature_dim, n_classes, hidden_units, config.seed)
    model = replace(model, train_config=config)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}

    epoch_losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            if pixel_mode and config.augment:
                aug = imaging.sample_augment_params_batch(rng, len(batch_idx))
                pixels = imaging.augment_batch(stack[batch_idx], aug)
                xb = featurize_batch(pixels, feature_side)
            else:
                xb = base_features[batch_idx]
            yb = labels[batch_idx]
            _, ce, grads = objective_and_grads(model, xb, yb, config.weight_decay)
            for name, g in grads.items():
                velocity[name] = config.momentum * velocity[name] - config.learning_rate * g
                model.params[name] += velocity[name]
            loss_sum += ce * len(batch_idx)
        epoch_losses.append(loss_sum / n)
    return TrainResult(model, epoch_losses)


# ---------------------------------------------------------------------------
# Relevance filtering


def relevance_keep_mask(model: ClassifierModel, features: np.ndarray) -> np.ndarray:
    """True where the building class wins the 13-way argmax."""
    if model.n_classes != len(RELEVANCE_CLASSES):
        raise WrongClassCountError(
            f"relevance model must have {len(RELEVANCE_CLASSES)} classes, "
            f"got {model.n_classes}")
    if features.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    probs = predict_batch(model, features)
    return probs.argmax(axis=1) == BUILDING_CLASS


def relevance_filter(patch_list, model: ClassifierModel,
                     features: np.ndarray | None = None) -> list:
    """Keep the patches classified as building; order is preserved.

    features may carry precomputed vectors aligned with patch_list to skip
    refeaturizing; the result is identical either way.
    """
    if features is None:
        features = featurize_batch([p.pixels for p in patch_list])
    elif len(patch_list) != features.shape[0]:
        raise LengthMismatchError(
            f"{len(patch_list)} patches vs {features.shape[0]} feature rows")
    keep = relevance_keep_mask(model, features)
    return [p for p, k in zip(patch_list, keep) if k]


def patch_labels_from_mask(mask: np.ndarray, geometries,
                           min_fraction: float = 0.5) -> np.ndarray:
    """Relevance labels for patches over a clutter mask.

    mask holds 0 for building texture and 1..12 for clutter categories.
    A patch takes the dominant clutter category when that category covers
    more than min_fraction of its area, else it is labeled building (0).
    """
    labels = np.zeros(len(geometries), dtype=np.intp)
    for i, g in enumerate(geometries):
        region = mask[g.y:g.y + g.side, g.x:g.x + g.side]
        counts = np.bincount(region.ravel(), minlength=len(RELEVANCE_CLASSES))
        cat = int(counts[1:].argmax()) + 1
        if counts[cat] > min_fraction * region.size:
            labels[i] = cat
    return labels


# ---------------------------------------------------------------------------
# Model files

MODEL_MAGIC = b"EPSC"
MODEL_FORMAT_VERSION = 1
_ARCH_CODES = {ARCH_LINEAR: 1, ARCH_MLP: 2}
_ARCH_FROM_CODE = {v: k for k, v in _ARCH_CODES.items()}
_PARAM_ORDER = {ARCH_LINEAR: ("w", "b"), ARCH_MLP: ("w1", "b1", "w2", "b2")}


def save_model(path, model: ClassifierModel) -> None:
    """Serialize a model; weights are stored as little-endian float32."""
    from .io_utils import atomic_write_bytes

    config_blob = json.dumps(
        model.train_config.__dict__ if model.train_config else {},
        sort_keys=True).encode()
    parts = [struct.pack(
        "<4sHBBIIIqI", MODEL_MAGIC, MODEL_FORMAT_VERSION,
        _ARCH_CODES[model.architecture], 0, model.n_classes,
        model.feature_dim, model.hidden_units, model.rng_seed,
        len(config_blob)), config_blob]
    for name in _PARAM_ORDER[model.architecture]:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_model(path) -> ClassifierModel:
    """Read a model file back; weights come out as float64."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read model file {path}: {exc}") from exc
    try:
        header = struct.unpack_from("<4sHBBIIIqI", blob, 0)
        offset = struct.calcsize("<4sHBBIIIqI")
        magic, version, arch_code, _, n_classes, feature_dim, hidden, seed, cfg_len = header
        if magic != MODEL_MAGIC:
            raise DecodeError(f"{path} is not a model file (bad magic)")
        if version != MODEL_FORMAT_VERSION:
            raise DecodeError(f"unsupported model format version {version}")
        arch = _ARCH_FROM_CODE.get(arch_code)
        if arch is None:
            raise DecodeError(f"unknown architecture code {arch_code}")
        cfg_dict = json.loads(blob[offset:offset + cfg_len].decode())
        offset += cfg_len
        params = {}
        for name in _PARAM_ORDER[arch]:
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            params[name] = arr.reshape(shape).astype(np.float64)
    except DecodeError:
        raise
    except (struct.error, ValueError, json.JSONDecodeError) as exc:
        raise DecodeError(f"corrupt model file {path}: {exc}") from exc
    config = TrainConfig(**cfg_dict) if cfg_dict else None
    return ClassifierModel(arch, n_classes, feature_dim, hidden, params,
                           rng_seed=seed, train_config=config)


# ---------------------------------------------------------------------------
# External per-patch likelihood adapter

LIKELIHOOD_KEY_COLUMNS = ("image_id", "x", "y", "side")


def write_external_likelihoods(path, rows) -> None:
    """Write (image_id, x, y, side, distribution) rows as CSV."""
    import csv
    import io as _io

    from .io_utils import atomic_write_text

    rows = list(rows)
    if not rows:
        raise EmptyInputError("no likelihood rows to write")
    n_classes = len(rows[0][4])
    buf = _io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(list(LIKELIHOOD_KEY_COLUMNS)
                    + [f"p_{i}" for i in range(n_classes)])
    for image_id, x, y, side, dist in rows:
        writer.writerow([image_id, x, y, side] + [repr(float(v)) for v in dist])
    atomic_write_text(path, buf.getvalue())


def read_external_likelihoods(path) -> dict:
    """Load externally computed per-patch class distributions.

    Returns {(image_id, x, y, side): (C,) float array}. This is the hook
    for plugging a stronger patch classifier into the same fusion stage.
    """
    import csv

    from .errors import MissingColumnError, ParseError

    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = [c for c in LIKELIHOOD_KEY_COLUMNS if c not in fields]
        if missing:
            raise MissingColumnError(
                f"missing column(s): {', '.join(missing)}", line=1)
        prob_cols = [c for c in fields if c.startswith("p_")]
        if not prob_cols:
            raise MissingColumnError("no p_<i> probability columns", line=1)
        prob_cols.sort(key=lambda c: int(c[2:]))
        table = {}
        for row in reader:
            line = reader.line_num
            try:
                key = (row["image_id"], int(row["x"]), int(row["y"]),
                       int(row["side"]))
                dist = np.array([float(row[c]) for c in prob_cols])
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=line) from None
            if dist.min() < 0 or not np.isclose(dist.sum(), 1.0, atol=1e-3):
                raise ParseError("row is not a probability distribution",
                                 line=line)
            table[key] = dist
    return table


def distributions_for_patches(table: dict, image_id: str, geometries) -> np.ndarray:
    """Pull the stored distribution for each geometry of one image."""
    rows = []
    for g in geometries:
        key = (image_id, g.x, g.y, g.side)
        if key not in table:
            raise PipelineError(f"no external likelihood for patch {key}")
        rows.append(table[key])
    if not rows:
        raise EmptyInputError(f"no patches requested for {image_id}")
    return np.stack(rows)
