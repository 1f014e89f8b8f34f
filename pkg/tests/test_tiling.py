"""Tissue detection, grid tiling, nucleus counting and patch filtering."""

import numpy as np
import pytest

from slidevec import tiling
from slidevec.errors import EmptySlideError
from slidevec.tiling import (
    DegenerateRasterWarning,
    NucleiConfig,
    PatchRecord,
    SlideRaster,
    TissueConfig,
    count_nuclei,
    detect_tissue,
    filter_patches,
    tile_slide,
)

PINK = (255, 105, 180)
WHITE = (255, 255, 255)
PURPLE = (70, 50, 130)


def solid(h, w, rgb):
    px = np.zeros((h, w, 3), dtype=np.uint8)
    px[:] = rgb
    return px


def raster(px, slide_id="s"):
    return SlideRaster(slide_id=slide_id, pixels=px)


def draw_disk(px, cy, cx, radius, rgb):
    yy, xx = np.ogrid[: px.shape[0], : px.shape[1]]
    px[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = rgb


def disk_area(radius):
    yy, xx = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    return int((yy**2 + xx**2 <= radius**2).sum())


class TestDetectTissue:
    def test_pure_white_raster_has_empty_mask(self):
        with pytest.warns(DegenerateRasterWarning):
            mask = detect_tissue(raster(solid(1024, 1024, WHITE)))
        assert mask.shape == (1024, 1024)
        assert mask.sum() == 0

    def test_half_pink_half_white_masks_exactly_the_pink_half(self):
        px = solid(256, 256, WHITE)
        px[:, :128] = PINK
        mask = detect_tissue(raster(px))
        expected = np.zeros((256, 256), dtype=bool)
        expected[:, :128] = True
        # morphology with edge-replicate padding keeps a half-plane exact
        assert np.array_equal(mask, expected)

    def test_closing_fills_isolated_dropouts_to_full_tissue(self):
        # solid pink with a few isolated less-saturated pixels: Otsu splits them
        # off, the closing step fills them back, so every patch is full tissue
        px = solid(1024, 1024, PINK)
        rng = np.random.default_rng(0)
        for _ in range(10):
            y, x = rng.integers(10, 1014, size=2)
            px[y, x] = (255, 200, 220)
        r = raster(px)
        mask = detect_tissue(r)
        assert mask.all()
        records = tile_slide(r, mask)
        assert [rec.tissue_fraction for rec in records] == [1.0, 1.0, 1.0, 1.0]

    def test_mirror_symmetry(self):
        rng = np.random.default_rng(3)
        px = solid(128, 96, WHITE)
        blob = rng.integers(0, 256, size=(40, 30, 3), dtype=np.uint8)
        px[20:60, 10:40] = blob
        mask = detect_tissue(raster(px))
        mirrored = detect_tissue(raster(px[:, ::-1]))
        assert np.array_equal(mask[:, ::-1], mirrored)

    def test_degenerate_raster_warns(self):
        with pytest.warns(DegenerateRasterWarning):
            mask = detect_tissue(raster(solid(600, 600, PINK)))
        assert mask.sum() == 0


class TestTileSlide:
    def test_exact_division_1024(self):
        r = raster(solid(1024, 1024, PINK))
        mask = np.ones((1024, 1024), dtype=bool)
        records = tile_slide(r, mask)
        assert [(rec.row, rec.col) for rec in records] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert all(rec.x == rec.col * 512 and rec.y == rec.row * 512 for rec in records)

    def test_remainders_dropped_1100x600(self):
        r = raster(solid(600, 1100, PINK))  # height 600, width 1100
        mask = np.ones((600, 1100), dtype=bool)
        records = tile_slide(r, mask)
        assert [(rec.row, rec.col) for rec in records] == [(0, 0), (0, 1)]

    def test_below_patch_size_is_empty(self):
        r = raster(solid(511, 511, PINK))
        records = tile_slide(r, np.ones((511, 511), dtype=bool))
        assert records == []

    def test_coverage_is_exact_and_disjoint(self):
        h, w = 1100, 1600
        r = raster(solid(h, w, PINK))
        records = tile_slide(r, np.ones((h, w), dtype=bool))
        assert len(records) == (h // 512) * (w // 512)
        seen = set()
        for rec in records:
            for key in [(rec.y, rec.x), (rec.y + 511, rec.x + 511)]:
                assert key not in seen
            seen.add((rec.y, rec.x))

    def test_tissue_fraction_counts_mask_pixels(self):
        mask = np.zeros((512, 1024), dtype=bool)
        mask[:, :512] = True
        mask[:256, 512:] = True  # second patch half covered
        r = raster(solid(512, 1024, PINK))
        records = tile_slide(r, mask)
        assert records[0].tissue_fraction == 1.0
        assert records[1].tissue_fraction == 0.5

    def test_mask_shape_mismatch_raises(self):
        r = raster(solid(512, 512, PINK))
        with pytest.raises(ValueError):
            tile_slide(r, np.ones((10, 10), dtype=bool))


class TestCountNuclei:
    def _disk_patch(self, centers, radius=8):
        px = solid(512, 512, WHITE)
        for cy, cx in centers:
            draw_disk(px, cy, cx, radius, PURPLE)
        return px

    def _grid_centers(self, n, step=40, start=30):
        return [(start + step * (i // 4), start + step * (i % 4)) for i in range(n)]

    def test_white_patch_counts_zero(self):
        assert count_nuclei(solid(512, 512, WHITE)) == 0

    def test_twelve_disjoint_disks(self):
        px = self._disk_patch(self._grid_centers(12))
        assert count_nuclei(px) == 12

    def test_two_merged_disks_count_as_one(self):
        centers = self._grid_centers(12)
        centers[1] = (centers[0][0], centers[0][1] + 10)  # overlap with disk 0
        px = self._disk_patch(centers)
        assert count_nuclei(px) == 11

    def test_translation_invariance(self):
        base = self._grid_centers(7)
        a = count_nuclei(self._disk_patch(base))
        b = count_nuclei(self._disk_patch([(y + 57, x + 91) for y, x in base]))
        assert a == b == 7

    def test_area_gate(self):
        assert disk_area(8) > 40  # the standard test disk passes the gate
        tiny = self._disk_patch([(100, 100)], radius=3)  # area 29 < min_area 40
        assert count_nuclei(tiny) == 0
        huge = self._disk_patch([(256, 256)], radius=40)  # area ~5025 > max_area
        assert count_nuclei(huge, NucleiConfig(max_area=4000)) == 0


class TestFilterPatches:
    def _records(self, counts, fraction=1.0):
        return [
            PatchRecord(row=0, col=i, x=i * 512, y=0, tissue_fraction=fraction,
                        nucleus_count=c)
            for i, c in enumerate(counts)
        ]

    def test_threshold_keeps_counts_at_least_ten(self):
        records = self._records([0, 9, 10, 250])
        kept = filter_patches(records, nuclei_min=10, tissue_min=0.5)
        assert [r.col for r in kept] == [2, 3]
        assert [r.kept for r in records] == [False, False, True, True]

    def test_zero_thresholds_are_identity(self):
        records = self._records([0, 1, 2], fraction=0.0)
        kept = filter_patches(records, nuclei_min=0, tissue_min=0.0)
        assert kept == records

    def test_all_below_threshold_is_empty_slide(self):
        with pytest.raises(EmptySlideError):
            filter_patches(self._records([5, 5, 5]), nuclei_min=10)

    def test_monotone_in_nuclei_min(self):
        rng = np.random.default_rng(11)
        records = self._records(rng.integers(0, 40, size=30).tolist())
        previous = None
        for threshold in range(0, 30, 5):
            try:
                kept = {r.col for r in filter_patches(records, nuclei_min=threshold)}
            except EmptySlideError:
                kept = set()
            if previous is not None:
                assert kept <= previous
            previous = kept

    def test_output_is_subset_in_grid_order(self):
        records = self._records([12, 3, 30, 10, 9, 11])
        kept = filter_patches(records)
        assert [r.col for r in kept] == sorted(r.col for r in kept)
        assert all(r in records for r in kept)


class TestManifestRoundTrip:
    def test_header_format_and_round_trip(self, tmp_path):
        records = [
            PatchRecord(row=0, col=0, x=0, y=0, tissue_fraction=0.123456789,
                        nucleus_count=4, kept=False),
            PatchRecord(row=0, col=1, x=512, y=0, tissue_fraction=1.0,
                        nucleus_count=25, kept=True),
        ]
        path = tmp_path / "s1.csv"
        tiling.write_patch_manifest(records, "s1", path)
        text = path.read_text(encoding="utf-8")
        assert text.splitlines()[0] == "slide_id,row,col,x,y,tissue_fraction,nucleus_count,kept"
        assert "\r" not in text
        assert "0.123457" in text  # six decimal places
        slide_id, loaded = tiling.read_patch_manifest(path)
        assert slide_id == "s1"
        assert [r.kept for r in loaded] == [False, True]
        assert loaded[1].nucleus_count == 25


class TestRasterIO:
    def test_png_and_ppm_loaders(self, tmp_path):
        from PIL import Image

        px = np.zeros((20, 30, 3), dtype=np.uint8)
        px[..., 0] = np.arange(30, dtype=np.uint8)[None, :] * 8
        Image.fromarray(px).save(tmp_path / "a.png")
        Image.fromarray(px).save(tmp_path / "b.ppm")
        a = tiling.load_raster(tmp_path / "a.png")
        b = tiling.load_raster(tmp_path / "b.ppm")
        assert a.slide_id == "a" and b.slide_id == "b"
        assert np.array_equal(a.pixels, px)
        assert np.array_equal(b.pixels, px)
        assert (tmp_path / "b.ppm").read_bytes()[:2] == b"P6"

    def test_tile_directory_mode(self, tmp_path):
        from PIL import Image

        d = tmp_path / "slideX"
        d.mkdir()
        px = solid(512, 512, WHITE)
        draw_disk(px, 100, 100, 8, PURPLE)
        Image.fromarray(px).save(d / "r0_c0.png")
        Image.fromarray(solid(512, 512, WHITE)).save(d / "r0_c1.png")
        records = tiling.records_from_tiles(tiling.list_tile_files(d))
        assert [(r.row, r.col) for r in records] == [(0, 0), (0, 1)]
        assert records[0].nucleus_count == 1
        assert records[1].nucleus_count == 0
        assert all(r.tissue_fraction == 1.0 for r in records)
