"""File-format helpers shared by the pipeline stages.

Every writer goes through an atomic write-then-rename so a crashed run
never leaves a truncated artifact behind.
"""

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import IoError, MissingColumnError, ParseError

PATCH_CSV_COLUMNS = ("image_id", "x", "y", "side", "contrast_score", "cluster_id")
PATCH_LABEL_COLUMNS = ("image_id", "x", "y", "side", "label")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_f32_matrix(path, matrix: np.ndarray) -> None:
    """Raw little-endian float32 rows, no header; row width is contextual."""
    atomic_write_bytes(path, np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_f32_matrix(path, n_cols: int) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    flat = np.frombuffer(blob, dtype="<f4")
    if n_cols <= 0 or flat.size % n_cols:
        raise ParseError(f"{path}: {flat.size} values do not form rows of {n_cols}")
    return flat.reshape(-1, n_cols).astype(np.float64)


def write_jsonl(path, rows) -> None:
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    atomic_write_text(path, text)


def read_jsonl(path) -> list:
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rows = []
    for i, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad JSON: {exc}", line=i) from None
    return rows


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def write_patch_csv(path, rows) -> None:
    """Selected-patch listing: image_id, x, y, side, contrast_score, cluster_id."""
    _write_csv(path, PATCH_CSV_COLUMNS, rows)


def _read_csv_dicts(path, required) -> tuple[list[dict], object]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            missing = [c for c in required if c not in fields]
            if missing:
                raise MissingColumnError(
                    f"{path}: missing column(s) {', '.join(missing)}", line=1)
            return [(row, reader.line_num) for row in reader], fields
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def read_patch_csv(path) -> list[dict]:
    """Rows of a selected-patch CSV with numeric fields converted."""
    raw, _ = _read_csv_dicts(path, PATCH_CSV_COLUMNS)
    rows = []
    for row, line in raw:
        try:
            rows.append({
                "image_id": row["image_id"],
                "x": int(row["x"]),
                "y": int(row["y"]),
                "side": int(row["side"]),
                "contrast_score": float(row["contrast_score"]),
                "cluster_id": int(row["cluster_id"]),
            })
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path}: {exc}", line=line) from None
    return rows


def write_patch_labels(path, rows) -> None:
    """Patch relevance labels: image_id, x, y, side, label (name or index)."""
    _write_csv(path, PATCH_LABEL_COLUMNS, rows)


def read_patch_labels(path) -> list[dict]:
    from .classify import RELEVANCE_CLASSES

    raw, _ = _read_csv_dicts(path, PATCH_LABEL_COLUMNS)
    rows = []
    for row, line in raw:
        label = (row["label"] or "").strip()
        if label in RELEVANCE_CLASSES:
            index = RELEVANCE_CLASSES.index(label)
        else:
            try:
                index = int(label)
            except ValueError:
                raise ParseError(
                    f"{path}: unknown label {label!r}", line=line) from None
            if not 0 <= index < len(RELEVANCE_CLASSES):
                raise ParseError(f"{path}: label index {index} out of range",
                                 line=line)
        try:
            rows.append({
                "image_id": row["image_id"],
                "x": int(row["x"]),
                "y": int(row["y"]),
                "side": int(row["side"]),
                "label": index,
            })
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path}: {exc}", line=line) from None
    return rows


def write_confusion_csv(path, matrix: np.ndarray, class_names) -> None:
    """Confusion matrix with labeled rows (true) and columns (predicted)."""
    header = ["true\\pred"] + list(class_names)
    rows = [[name] + [int(v) for v in row]
            for name, row in zip(class_names, np.asarray(matrix))]
    _write_csv(path, header, rows)


def resolve_relative(base_file, relative_path: str) -> Path:
    """A path from a manifest or CSV, resolved against that file's directory."""
    rel = Path(relative_path)
    return rel if rel.is_absolute() else Path(base_file).parent / rel
