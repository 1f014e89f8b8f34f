"""FVEC1 feature interchange: per-slide patch-embedding matrices plus JSON manifests.

Wire format (little-endian, machine independent):

    bytes 0..4   magic ``FVEC1``
    bytes 5..8   u32 n_patches
    bytes 9..12  u32 dim
    then         n_patches * dim IEEE-754 binary32 values, row major

Each ``<name>.fvec`` file has a ``<name>.manifest.json`` sidecar carrying
``slide_id``, ``label``, ``encoder_name``, ``dim`` and ``patch_keys`` (one
``[row, col]`` pair per matrix row). Cohort labels additionally live in a
``labels.csv`` (header ``slide_id,label``) which wins over manifest labels
on conflict.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimMismatchError,
    EmptyCohortError,
    FvecFormatError,
    MissingLabelError,
    MixedDimError,
    NonFiniteError,
    TruncatedPayloadError,
)

MAGIC = b"FVEC1"
_HEADER = struct.Struct("<5sII")

LABELS_FILENAME = "labels.csv"


@dataclass(frozen=True)
class SlideManifest:
    """Sidecar metadata tying feature rows back to slide patches."""

    slide_id: str
    label: int
    encoder_name: str
    dim: int
    patch_keys: tuple[tuple[int, int], ...]

    @property
    def n_patches(self) -> int:
        return len(self.patch_keys)

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "label": self.label,
            "encoder_name": self.encoder_name,
            "dim": self.dim,
            "patch_keys": [list(k) for k in self.patch_keys],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SlideManifest":
        return cls(
            slide_id=str(d["slide_id"]),
            label=int(d["label"]),
            encoder_name=str(d["encoder_name"]),
            dim=int(d["dim"]),
            patch_keys=tuple((int(r), int(c)) for r, c in d["patch_keys"]),
        )


def ensure_feature_matrix(matrix: np.ndarray) -> np.ndarray:
    """Validate and normalize a feature matrix to C-contiguous float32."""
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise FvecFormatError(f"feature matrix must be 2-D, got shape {arr.shape}")
    n, d = arr.shape
    if n < 1 or d < 1:
        raise FvecFormatError(f"feature matrix must be at least 1x1, got {n}x{d}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise NonFiniteError("feature matrix contains NaN or infinite values")
    return arr


def encode_fvec(matrix: np.ndarray) -> bytes:
    arr = ensure_feature_matrix(matrix)
    n, d = arr.shape
    return _HEADER.pack(MAGIC, n, d) + arr.astype("<f4", copy=False).tobytes(order="C")


def decode_fvec(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"file too short for FVEC1 header ({len(data)} bytes)")
    magic, n, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if n < 1 or d < 1:
        raise FvecFormatError(f"invalid FVEC1 shape {n}x{d}")
    expected = _HEADER.size + 4 * n * d
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"payload truncated: expected {expected} bytes, got {len(data)}"
        )
    if len(data) > expected:
        raise FvecFormatError(f"trailing data: expected {expected} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, d).copy()
    if not np.isfinite(arr).all():
        raise NonFiniteError("FVEC1 payload contains NaN or infinite values")
    return arr


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(fvec_path: Path | str) -> Path:
    p = Path(fvec_path)
    name = p.name[: -len(".fvec")] if p.name.endswith(".fvec") else p.name
    return p.with_name(name + ".manifest.json")


def write_fvec(matrix: np.ndarray, path: Path | str) -> None:
    _atomic_write_bytes(Path(path), encode_fvec(matrix))


def read_fvec(path: Path | str) -> np.ndarray:
    return decode_fvec(Path(path).read_bytes())


def write_features(matrix: np.ndarray, manifest: SlideManifest, path: Path | str) -> None:
    """Write the FVEC1 payload plus its manifest sidecar (both atomic)."""
    arr = ensure_feature_matrix(matrix)
    n, d = arr.shape
    if manifest.dim != d:
        raise DimMismatchError(f"manifest dim {manifest.dim} != matrix dim {d}")
    if manifest.n_patches != n:
        raise DimMismatchError(
            f"manifest lists {manifest.n_patches} patch keys for {n} feature rows"
        )
    path = Path(path)
    _atomic_write_bytes(path, encode_fvec(arr))
    payload = json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n"
    _atomic_write_bytes(manifest_path(path), payload.encode("utf-8"))


def read_features(path: Path | str) -> tuple[np.ndarray, SlideManifest]:
    """Read and cross-validate a feature file and its manifest."""
    path = Path(path)
    matrix = read_fvec(path)
    mpath = manifest_path(path)
    manifest = SlideManifest.from_dict(json.loads(mpath.read_text(encoding="utf-8")))
    n, d = matrix.shape
    if manifest.dim != d:
        raise DimMismatchError(
            f"{path.name}: manifest dim {manifest.dim} != payload dim {d}"
        )
    if manifest.n_patches != n:
        raise DimMismatchError(
            f"{path.name}: manifest has {manifest.n_patches} patch keys, payload {n} rows"
        )
    return matrix, manifest


def write_labels(labels: dict[str, int], path: Path | str) -> None:
    lines = ["slide_id,label"]
    for sid in sorted(labels):
        lines.append(f"{sid},{labels[sid]}")
    _atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def read_labels(path: Path | str) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["slide_id", "label"]:
            raise FvecFormatError(f"{path}: labels header must be 'slide_id,label'")
        return {row[0]: int(row[1]) for row in reader if row}


@dataclass
class SlideFeatures:
    slide_id: str
    matrix: np.ndarray
    manifest: SlideManifest
    label: int


@dataclass
class CohortReport:
    n_slides: int
    dim: int
    encoder_names: tuple[str, ...]
    per_class: dict[int, int]
    warnings: list[str]
    slide_ids: tuple[str, ...]


def _cohort_fvec_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.glob("*.fvec") if not p.name.endswith(".bag.fvec"))


def load_cohort(
    directory: Path | str, require_labels: bool = True
) -> tuple[list[SlideFeatures], list[str]]:
    """Load every slide's features with labels resolved (labels.csv wins on conflict).

    Returns the slides (sorted by slide_id) and a list of warning strings.
    With ``require_labels=False`` unlabeled slides (label -1) pass through,
    which clustering-only runs rely on.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"cohort directory not found: {directory}")
    files = _cohort_fvec_files(directory)
    if not files:
        raise EmptyCohortError(f"no .fvec feature files in {directory}")

    csv_labels: dict[str, int] | None = None
    labels_path = directory / LABELS_FILENAME
    if labels_path.exists():
        csv_labels = read_labels(labels_path)

    notes: list[str] = []
    slides: list[SlideFeatures] = []
    for path in files:
        matrix, manifest = read_features(path)
        sid = manifest.slide_id
        stem = path.name[: -len(".fvec")]
        if sid != stem:
            notes.append(f"{path.name}: manifest slide_id {sid!r} differs from filename")
        label = manifest.label
        if csv_labels is not None:
            if sid not in csv_labels:
                if require_labels:
                    raise MissingLabelError(f"slide {sid} missing from {LABELS_FILENAME}")
            else:
                if csv_labels[sid] != label:
                    msg = (
                        f"slide {sid}: label {label} in manifest but {csv_labels[sid]} in "
                        f"{LABELS_FILENAME}; using the CSV"
                    )
                    notes.append(msg)
                    warnings.warn(msg, UserWarning, stacklevel=2)
                label = csv_labels[sid]
        if label < 0 and require_labels:
            raise MissingLabelError(f"slide {sid} has no usable label (got {label})")
        slides.append(SlideFeatures(sid, matrix, manifest, label))

    slides.sort(key=lambda s: s.slide_id)
    return slides, notes


def cohort_labels(directory: Path | str) -> dict[str, int]:
    """Resolved slide labels: labels.csv when present, manifest labels otherwise."""
    slides, _ = load_cohort(directory, require_labels=True)
    return {s.slide_id: s.label for s in slides}


def validate_cohort(directory: Path | str) -> CohortReport:
    """Check that a feature directory forms a coherent cohort."""
    slides, notes = load_cohort(directory)
    dims = sorted({s.matrix.shape[1] for s in slides})
    if len(dims) > 1:
        raise MixedDimError(f"cohort mixes feature dims {dims}")
    per_class: dict[int, int] = {}
    for s in slides:
        per_class[s.label] = per_class.get(s.label, 0) + 1
    encoders = tuple(sorted({s.manifest.encoder_name for s in slides}))
    return CohortReport(
        n_slides=len(slides),
        dim=dims[0],
        encoder_names=encoders,
        per_class=dict(sorted(per_class.items())),
        warnings=notes,
        slide_ids=tuple(s.slide_id for s in slides),
    )
