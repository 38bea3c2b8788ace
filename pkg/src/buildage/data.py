"""Dataset manifests, construction epochs, splits, and the synthetic corpus.

Buildings are labeled by construction decade: six epochs from the 1960s
through the 2010s, where every year from 2010 onward folds into the last
epoch. Records carry both the year of construction (yoc) and the year of
last facade renovation (fyoc >= yoc); only unrenovated records (fyoc ==
yoc) show their construction era and survive filtering.

Splits are house-disjoint: whole houses are shuffled by seed and greedily
dealt to the split currently furthest below its target image fraction.
"""

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .classify import RELEVANCE_CLASSES
from .errors import (
    EmptyInputError,
    IoError,
    MissingColumnError,
    OutOfRangeError,
    ParseError,
)

EPOCH_START_YEAR = 1960
EPOCH_NAMES = ("1960s", "1970s", "1980s", "1990s", "2000s", "2010s")
N_EPOCHS = len(EPOCH_NAMES)

SPLIT_NAMES = ("train", "validation", "test")
MANIFEST_COLUMNS = ("image_path", "house_id", "yoc", "fyoc")


def epoch_of_year(yoc: int) -> int:
    """Epoch index of a construction year; the last epoch is open-ended."""
    if yoc < EPOCH_START_YEAR:
        raise OutOfRangeError(
            f"year {yoc} predates the first epoch ({EPOCH_START_YEAR}s)")
    return min((yoc - EPOCH_START_YEAR) // 10, N_EPOCHS - 1)


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    house_id: str
    yoc: int
    fyoc: int
    split: str | None = None

    def __post_init__(self):
        if self.fyoc < self.yoc:
            raise ValueError(
                f"fyoc {self.fyoc} precedes construction year {self.yoc}")
        if self.split is not None and self.split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.7
    validation: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        ratios = self.as_tuple()
        if any(r <= 0 for r in ratios):
            raise ValueError("all split ratios must be positive")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios sum to {sum(ratios)}, not 1")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.train, self.validation, self.test)


def filter_renovated(records) -> list[ManifestRecord]:
    """Keep only records whose facade still dates from construction."""
    return [r for r in records if r.fyoc == r.yoc]


def split_by_house(records, ratios: SplitRatios, seed: int) -> list[ManifestRecord]:
    """Assign every record a split such that no house straddles splits.

    Houses are shuffled by the seed, then each house (with all its images)
    goes to the split whose assigned image fraction is furthest below its
    target; ties prefer train, then validation, then test.
    """
    records = list(records)
    if not records:
        raise EmptyInputError("no records to split")
    house_sizes: dict[str, int] = {}
    for r in records:
        house_sizes[r.house_id] = house_sizes.get(r.house_id, 0) + 1
    houses = list(house_sizes)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(houses))

    total = len(records)
    targets = ratios.as_tuple()
    filled = [0, 0, 0]
    assignment: dict[str, str] = {}
    for idx in order:
        house = houses[idx]
        deficits = [targets[i] - filled[i] / total for i in range(3)]
        best = 0
        for i in (1, 2):
            if deficits[i] > deficits[best]:
                best = i
        assignment[house] = SPLIT_NAMES[best]
        filled[best] += house_sizes[house]
    return [replace(r, split=assignment[r.house_id]) for r in records]


def parse_manifest(source) -> list[ManifestRecord]:
    """Parse manifest CSV with header image_path,house_id,yoc,fyoc[,split].

    source may be a string, a file object, or an iterable of lines.
    Unknown columns are ignored; a missing split column leaves records
    unassigned. Errors carry the offending line number.
    """
    lines = io.StringIO(source) if isinstance(source, str) else source
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise ParseError("empty manifest", line=1)
    missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise MissingColumnError(
            f"missing required column(s): {', '.join(missing)}", line=1)

    records = []
    for row in reader:
        line = reader.line_num
        if row.get(None):
            raise ParseError("more fields than header columns", line=line)
        path = (row["image_path"] or "").strip()
        house = (row["house_id"] or "").strip()
        if not path or not house:
            raise ParseError("empty image_path or house_id", line=line)
        try:
            yoc = int(row["yoc"])
            fyoc = int(row["fyoc"])
        except (TypeError, ValueError):
            raise ParseError("yoc and fyoc must be integers", line=line) from None
        split = (row.get("split") or "").strip() or None
        try:
            records.append(ManifestRecord(path, house, yoc, fyoc, split))
        except ValueError as exc:
            raise ParseError(str(exc), line=line) from None
    return records


def read_manifest(path) -> list[ManifestRecord]:
    try:
        with open(path, newline="") as fh:
            return parse_manifest(fh)
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc


def write_manifest(path, records) -> None:
    from .io_utils import atomic_write_text

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(list(MANIFEST_COLUMNS) + ["split"])
    for r in records:
        writer.writerow([r.image_path, r.house_id, r.yoc, r.fyoc, r.split or ""])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Synthetic corpus
#
# Six texture families, one per epoch, each with a distinctive stripe
# orientation, stripe period, and two-color palette, so several redundant
# cues separate the classes. Clutter blobs are noise-filled rectangles and
# ellipses that emulate foreground objects; each blob carries one of the
# twelve non-building relevance categories, recorded in a mask.

_STRIPE_ANGLES_DEG = (0.0, 30.0, 60.0, 90.0, 120.0, 150.0)
_STRIPE_PERIODS = (6.0, 9.0, 12.0, 15.0, 18.0, 21.0)
_STRIPE_PALETTES = (
    ((150, 40, 40), (240, 220, 200)),
    ((160, 95, 30), (250, 235, 180)),
    ((135, 135, 35), (250, 250, 210)),
    ((40, 130, 60), (225, 245, 225)),
    ((40, 80, 150), (215, 230, 250)),
    ((120, 50, 140), (240, 225, 250)),
)
_CLUTTER_COLORS = (
    (60, 60, 70),     # cars
    (200, 150, 120),  # people
    (30, 90, 30),     # trees
    (80, 160, 60),    # grass
    (90, 90, 90),     # asphalt
    (130, 130, 140),  # poles
    (220, 140, 60),   # sunblind
    (150, 100, 60),   # furniture
    (110, 80, 50),    # fence
    (100, 70, 40),    # firewood
    (230, 40, 40),    # sign
    (170, 170, 170),  # miscellaneous
)
assert len(_CLUTTER_COLORS) == len(RELEVANCE_CLASSES) - 1


@dataclass
class SynthCorpus:
    images: list[np.ndarray]         # uint8 (S, S, 3)
    clutter_masks: list[np.ndarray]  # uint8 (S, S): 0 texture, 1..12 clutter
    records: list[ManifestRecord]


def synth_corpus(n_per_class: int, image_size: int, clutter_fraction: float,
                 seed: int) -> SynthCorpus:
    """Generate the labeled synthetic corpus, byte-reproducible per seed.

    n_per_class images per epoch class; yoc is the decade start year of
    the class. Each image is its own house. clutter_fraction is the
    approximate fraction of pixels covered by clutter blobs; 0 disables
    clutter entirely.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    if not 0.0 <= clutter_fraction < 1.0:
        raise ValueError("clutter_fraction must be in [0, 1)")

    images, masks, records = [], [], []
    for cls in range(N_EPOCHS):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, cls, i])
            img, mask = _synth_image(cls, image_size, clutter_fraction, rng)
            images.append(img)
            masks.append(mask)
            year = EPOCH_START_YEAR + 10 * cls
            records.append(ManifestRecord(
                image_path=f"images/epoch{cls}_{i:04d}.png",
                house_id=f"house_{cls}_{i:04d}",
                yoc=year, fyoc=year))
    return SynthCorpus(images, masks, records)


def _synth_image(cls: int, size: int, clutter_fraction: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    angle = np.deg2rad(_STRIPE_ANGLES_DEG[cls] + rng.uniform(-4.0, 4.0))
    period = _STRIPE_PERIODS[cls] * rng.uniform(0.92, 1.08)
    phase = rng.uniform(0.0, 2.0 * period)
    dark = np.array(_STRIPE_PALETTES[cls][0], dtype=np.float64)
    light = np.array(_STRIPE_PALETTES[cls][1], dtype=np.float64)
    dark = dark + rng.uniform(-12, 12, 3)
    light = light + rng.uniform(-12, 12, 3)

    yy, xx = np.mgrid[0:size, 0:size]
    proj = xx * np.cos(angle) + yy * np.sin(angle) + phase
    stripe = (np.floor(proj / period) % 2).astype(bool)
    img = np.where(stripe[..., None], light[None, None], dark[None, None])
    img += rng.uniform(-8.0, 8.0, img.shape)

    mask = np.zeros((size, size), dtype=np.uint8)
    if clutter_fraction > 0.0:
        target = clutter_fraction * size * size
        lo, hi = max(3, size // 8), max(4, size // 4)
        for _ in range(64):
            if np.count_nonzero(mask) >= target:
                break
            category = int(rng.integers(1, len(RELEVANCE_CLASSES)))
            bw = int(rng.integers(lo, hi + 1))
            bh = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, size - bw + 1))
            y0 = int(rng.integers(0, size - bh + 1))
            block = np.zeros((bh, bw), dtype=bool)
            if rng.random() < 0.5:
                block[:] = True
            else:
                by, bx = np.mgrid[0:bh, 0:bw]
                cy, cx = (bh - 1) / 2.0, (bw - 1) / 2.0
                block = ((by - cy) / (bh / 2.0)) ** 2 + \
                        ((bx - cx) / (bw / 2.0)) ** 2 <= 1.0
            color = np.array(_CLUTTER_COLORS[category - 1], dtype=np.float64)
            noise = rng.uniform(-45.0, 45.0, (bh, bw, 3))
            region = img[y0:y0 + bh, x0:x0 + bw]
            region[block] = (color[None, None] + noise)[block]
            mask[y0:y0 + bh, x0:x0 + bw][block] = category

    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask
