"""Pipeline configuration: defaults, JSON loading, validation, echoing.

A single JSON document configures every stage. Any subset of keys may be
given; missing values fall back to defaults. Stage seeds derive from the
master seed unless set explicitly, so one --seed flag reproduces a run.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .classify import ARCH_LINEAR, ARCH_MLP, ARCHITECTURES, TrainConfig
from .data import SplitRatios
from .descriptors import DescriptorParams
from .errors import ConfigError, IoError
from .fusion import FusionConfig
from .patches import PatchConfig
from .selection import SelectionConfig

DEFAULT_SEED = 42
DEFAULT_ENSEMBLE = (ARCH_LINEAR, ARCH_MLP)

# Offsets separating the derived per-stage seed streams.
_SELECTION_SEED_OFFSET = 11
_RELEVANCE_SEED_OFFSET = 23
_EPOCH_SEED_OFFSET = 37


@dataclass
class PipelineConfig:
    seed: int = DEFAULT_SEED
    patch: PatchConfig = field(default_factory=PatchConfig)
    descriptor: DescriptorParams = field(default_factory=DescriptorParams)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    relevance_train: TrainConfig = field(default_factory=TrainConfig)
    epoch_train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    split_ratios: SplitRatios = field(default_factory=SplitRatios)
    ensemble: tuple[str, ...] = DEFAULT_ENSEMBLE
    relevance_arch: str = ARCH_LINEAR
    mlp_hidden_units: int = 64
    feature_side: int = 64
    relevance_patches_per_image: int = 20

    def __post_init__(self):
        if self.relevance_arch not in ARCHITECTURES:
            raise ValueError(f"unknown relevance_arch {self.relevance_arch!r}")
        if not self.ensemble:
            raise ValueError("ensemble must name at least one architecture")
        for arch in self.ensemble:
            if arch not in ARCHITECTURES:
                raise ValueError(f"unknown ensemble architecture {arch!r}")
        if self.mlp_hidden_units < 1:
            raise ValueError("mlp_hidden_units must be >= 1")
        if self.feature_side < 4:
            raise ValueError("feature_side must be >= 4")
        if self.relevance_patches_per_image < 1:
            raise ValueError("relevance_patches_per_image must be >= 1")


_SECTIONS = {
    "patch": PatchConfig,
    "descriptor": DescriptorParams,
    "selection": SelectionConfig,
    "relevance_train": TrainConfig,
    "epoch_train": TrainConfig,
    "fusion": FusionConfig,
    "split_ratios": SplitRatios,
}
_TUPLE_FIELDS = {("patch", "sides"), (None, "ensemble")}


def default_config(seed: int = DEFAULT_SEED) -> PipelineConfig:
    """Defaults with per-stage seeds derived from the master seed."""
    return PipelineConfig(
        seed=seed,
        selection=SelectionConfig(seed=seed + _SELECTION_SEED_OFFSET),
        relevance_train=TrainConfig(seed=seed + _RELEVANCE_SEED_OFFSET),
        epoch_train=TrainConfig(seed=seed + _EPOCH_SEED_OFFSET),
    )


def _merge_section(section: str, base, overrides: dict):
    cls = _SECTIONS[section]
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - valid
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")
    fixed = {}
    for key, value in overrides.items():
        if (section, key) in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        fixed[key] = value
    try:
        return dataclasses.replace(base, **fixed)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value in {section}: {exc}") from exc


def config_from_dict(raw: dict, seed_override: int | None = None) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    top_fields = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(raw) - top_fields
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")

    seed = seed_override if seed_override is not None else raw.get("seed", DEFAULT_SEED)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    cfg = default_config(seed)

    scalars = {}
    for key, value in raw.items():
        if key == "seed":
            continue
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a JSON object")
            cfg = dataclasses.replace(
                cfg, **{key: _merge_section(key, getattr(cfg, key), value)})
        else:
            if (None, key) in _TUPLE_FIELDS and isinstance(value, list):
                value = tuple(value)
            scalars[key] = value
    if scalars:
        try:
            cfg = dataclasses.replace(cfg, **scalars)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
    return cfg


def load_config(path=None, seed_override: int | None = None) -> PipelineConfig:
    """Config from a JSON file (or pure defaults when path is None)."""
    if path is None:
        return config_from_dict({}, seed_override)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw, seed_override)


def config_to_dict(cfg: PipelineConfig) -> dict:
    """JSON-safe nested dict (tuples become lists), for echoing and audit."""
    out = dataclasses.asdict(cfg)
    out["patch"]["sides"] = list(out["patch"]["sides"])
    out["ensemble"] = list(out["ensemble"])
    return out
