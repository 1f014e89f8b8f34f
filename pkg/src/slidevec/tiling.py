"""Slide rasters to filtered patch grids.

Tissue is detected by Otsu-thresholding HSV saturation followed by a
morphological close/open; the raster is cut into non-overlapping 512x512
windows anchored at (0,0); nuclei are counted per patch by hematoxylin
color deconvolution, Otsu binarization and connected-component filtering;
patches below the nucleus-count or tissue-fraction thresholds are dropped.
"""

from __future__ import annotations

import csv
import logging
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import EmptySlideError

log = logging.getLogger(__name__)

PATCH_SIZE = 512

# Ruifrok-Johnston hematoxylin optical-density components for H&E stains.
HEMATOXYLIN_OD = np.array([0.650, 0.704, 0.286], dtype=np.float64)

PATCH_MANIFEST_HEADER = "slide_id,row,col,x,y,tissue_fraction,nucleus_count,kept"

_TILE_NAME = re.compile(r"^r(\d+)_c(\d+)\.png$")


class DegenerateRasterWarning(UserWarning):
    """Raster has no pixel variation; tissue detection is meaningless."""


@dataclass(frozen=True)
class TissueConfig:
    morph_radius: int = 2


@dataclass(frozen=True)
class NucleiConfig:
    open_radius: int = 1
    min_area: int = 40
    max_area: int = 4000


@dataclass(frozen=True)
class SlideRaster:
    """In-memory RGB slide, 8 bits per channel, row major."""

    slide_id: str
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"raster must be (H, W, 3) uint8, got {px.shape} {px.dtype}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchRecord:
    """One grid window of a slide; (x, y) is the top-left pixel corner."""

    row: int
    col: int
    x: int
    y: int
    tissue_fraction: float
    nucleus_count: int = 0
    kept: bool = False


def load_raster(path: Path | str, slide_id: str | None = None) -> SlideRaster:
    """Load a PNG or binary PPM (P6) file as an RGB raster."""
    path = Path(path)
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return SlideRaster(slide_id=slide_id or path.stem, pixels=pixels)


def rgb_saturation(pixels: np.ndarray) -> np.ndarray:
    """HSV saturation channel in [0, 1]: (max - min) / max, 0 for black."""
    px = pixels.astype(np.float64)
    cmax = px.max(axis=2)
    cmin = px.min(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        sat = np.where(cmax > 0, (cmax - cmin) / cmax, 0.0)
    return sat


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold over a 256-bin histogram of the value range.

    A constant input yields that constant, so ``values > threshold`` selects
    nothing (the no-signal convention used throughout this module).
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("otsu_threshold of empty array")
    vmin, vmax = float(v.min()), float(v.max())
    if vmin == vmax:
        return vmin
    hist, edges = np.histogram(v, bins=bins, range=(vmin, vmax))
    p = hist.astype(np.float64) / v.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    omega = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * omega - mu) ** 2 / (omega * (1.0 - omega))
    between = np.nan_to_num(between[:-1], nan=0.0, posinf=0.0)
    idx = int(np.argmax(between))
    return float(edges[idx + 1])


def _morph(mask: np.ndarray, radius: int, op) -> np.ndarray:
    # Edge-replicate padding keeps the operation exact at raster borders and
    # mirror-equivariant, which scipy's default zero border is not.
    footprint = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    padded = np.pad(mask, radius, mode="edge")
    out = op(padded, structure=footprint)
    return out[radius:-radius, radius:-radius]


def morph_close_open(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary closing then opening with a square structuring element."""
    if radius < 1:
        return mask.copy()
    m = _morph(mask, radius, ndimage.binary_dilation)
    m = _morph(m, radius, ndimage.binary_erosion)
    m = _morph(m, radius, ndimage.binary_erosion)
    m = _morph(m, radius, ndimage.binary_dilation)
    return m


def morph_open(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 1:
        return mask.copy()
    m = _morph(mask, radius, ndimage.binary_erosion)
    return _morph(m, radius, ndimage.binary_dilation)


def detect_tissue(raster: SlideRaster, cfg: TissueConfig = TissueConfig()) -> np.ndarray:
    """Boolean tissue mask with the same height/width as the raster."""
    px = raster.pixels
    if bool((px == px[0, 0]).all()):
        warnings.warn(
            f"slide {raster.slide_id}: all pixels identical; returning empty tissue mask",
            DegenerateRasterWarning,
            stacklevel=2,
        )
        return np.zeros(px.shape[:2], dtype=bool)
    sat = rgb_saturation(px)
    mask = sat > otsu_threshold(sat)
    return morph_close_open(mask, cfg.morph_radius)


def tile_slide(
    raster: SlideRaster, mask: np.ndarray, patch_size: int = PATCH_SIZE
) -> list[PatchRecord]:
    """One record per complete patch window on the non-overlapping grid.

    Windows running past the raster edge are discarded; a raster smaller than
    ``patch_size`` in either dimension yields no records.
    """
    if mask.shape != (raster.height, raster.width):
        raise ValueError(
            f"mask shape {mask.shape} != raster shape {(raster.height, raster.width)}"
        )
    n_rows = raster.height // patch_size
    n_cols = raster.width // patch_size
    if n_rows == 0 or n_cols == 0:
        log.warning(
            "slide %s: raster %dx%d smaller than patch size %d; no patches",
            raster.slide_id, raster.width, raster.height, patch_size,
        )
        return []
    cropped = mask[: n_rows * patch_size, : n_cols * patch_size]
    fractions = cropped.reshape(n_rows, patch_size, n_cols, patch_size).mean(axis=(1, 3))
    records = []
    for r in range(n_rows):
        for c in range(n_cols):
            records.append(
                PatchRecord(
                    row=r,
                    col=c,
                    x=c * patch_size,
                    y=r * patch_size,
                    tissue_fraction=float(fractions[r, c]),
                )
            )
    return records


def patch_pixels(raster: SlideRaster, record: PatchRecord, patch_size: int = PATCH_SIZE) -> np.ndarray:
    return raster.pixels[record.y : record.y + patch_size, record.x : record.x + patch_size]


def hematoxylin_map(patch: np.ndarray) -> np.ndarray:
    """Optical density projected onto the normalized hematoxylin stain vector."""
    px = np.maximum(patch.astype(np.float64), 1.0)
    od = -np.log10(px / 255.0)
    unit = HEMATOXYLIN_OD / np.linalg.norm(HEMATOXYLIN_OD)
    return od @ unit


def count_nuclei(patch: np.ndarray, cfg: NucleiConfig = NucleiConfig()) -> int:
    """Count nucleus-sized connected components in the hematoxylin channel.

    Pipeline: optical-density transform, projection onto the hematoxylin
    stain vector, Otsu binarization, morphological opening, 8-connected
    labeling, and an area gate of [min_area, max_area] pixels.
    """
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ValueError(f"patch must be (H, W, 3) RGB, got shape {patch.shape}")
    hema = hematoxylin_map(patch)
    binary = hema > otsu_threshold(hema)
    if not binary.any():
        return 0
    binary = morph_open(binary, cfg.open_radius)
    labels, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return 0
    areas = np.bincount(labels.ravel())[1:]
    return int(((areas >= cfg.min_area) & (areas <= cfg.max_area)).sum())


def filter_patches(
    records: list[PatchRecord], nuclei_min: int = 10, tissue_min: float = 0.5
) -> list[PatchRecord]:
    """Flag each record and return the kept ones in their original grid order.

    Raises EmptySlideError when nothing survives: such a slide cannot
    produce a bag downstream.
    """
    kept: list[PatchRecord] = []
    for rec in records:
        rec.kept = rec.nucleus_count >= nuclei_min and rec.tissue_fraction >= tissue_min
        if rec.kept:
            kept.append(rec)
    if not kept:
        raise EmptySlideError(
            f"all {len(records)} patches filtered out "
            f"(nuclei_min={nuclei_min}, tissue_min={tissue_min})"
        )
    return kept


def write_patch_manifest(records: list[PatchRecord], slide_id: str, path: Path | str) -> None:
    """CSV manifest of all records (kept and dropped), UTF-8, LF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PATCH_MANIFEST_HEADER.split(","))
        for r in records:
            writer.writerow(
                [
                    slide_id,
                    r.row,
                    r.col,
                    r.x,
                    r.y,
                    f"{r.tissue_fraction:.6f}",
                    r.nucleus_count,
                    "true" if r.kept else "false",
                ]
            )


def read_patch_manifest(path: Path | str) -> tuple[str, list[PatchRecord]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PATCH_MANIFEST_HEADER.split(","):
            raise ValueError(f"{path}: unexpected patch manifest header {header}")
        slide_id = ""
        records = []
        for row in reader:
            if not row:
                continue
            slide_id = row[0]
            records.append(
                PatchRecord(
                    row=int(row[1]),
                    col=int(row[2]),
                    x=int(row[3]),
                    y=int(row[4]),
                    tissue_fraction=float(row[5]),
                    nucleus_count=int(row[6]),
                    kept=row[7] == "true",
                )
            )
    return slide_id, records


def list_tile_files(tile_dir: Path | str) -> list[tuple[int, int, Path]]:
    """Pre-extracted tile mode: ``<slide_id>/r{row}_c{col}.png`` files, sorted."""
    tiles = []
    for p in Path(tile_dir).iterdir():
        m = _TILE_NAME.match(p.name)
        if m:
            tiles.append((int(m.group(1)), int(m.group(2)), p))
    tiles.sort(key=lambda t: (t[0], t[1]))
    return tiles


def records_from_tiles(
    tiles: list[tuple[int, int, Path]],
    nuclei_cfg: NucleiConfig = NucleiConfig(),
    patch_size: int = PATCH_SIZE,
) -> list[PatchRecord]:
    """Build patch records from pre-extracted tiles.

    Tissue fraction is taken as 1.0 (tiles are assumed pre-filtered for
    tissue upstream); nuclei are counted per tile.
    """
    records = []
    for row, col, path in tiles:
        with Image.open(path) as img:
            px = np.asarray(img.convert("RGB"), dtype=np.uint8)
        records.append(
            PatchRecord(
                row=row,
                col=col,
                x=col * patch_size,
                y=row * patch_size,
                tissue_fraction=1.0,
                nucleus_count=count_nuclei(px, nuclei_cfg),
            )
        )
    return records


def save_patch_png(patch: np.ndarray, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(patch, mode="RGB").save(path, format="PNG")


def annotate_nucleus_counts(
    raster: SlideRaster,
    records: list[PatchRecord],
    cfg: NucleiConfig = NucleiConfig(),
    patch_size: int = PATCH_SIZE,
) -> list[PatchRecord]:
    """Fill nucleus_count on every record from the raster pixels."""
    for rec in records:
        rec.nucleus_count = count_nuclei(patch_pixels(raster, rec, patch_size), cfg)
    return records


__all__ = [
    "PATCH_SIZE",
    "DegenerateRasterWarning",
    "TissueConfig",
    "NucleiConfig",
    "SlideRaster",
    "PatchRecord",
    "load_raster",
    "rgb_saturation",
    "otsu_threshold",
    "morph_close_open",
    "morph_open",
    "detect_tissue",
    "tile_slide",
    "patch_pixels",
    "hematoxylin_map",
    "count_nuclei",
    "filter_patches",
    "write_patch_manifest",
    "read_patch_manifest",
    "list_tile_files",
    "records_from_tiles",
    "save_patch_png",
    "annotate_nucleus_counts",
]
