"""Slide raster I/O, tiling, downsampling, dataset manifests, artifact masks.

Slides are stored as 8-bit RGB PNG (the one supported lossless format);
scanner container formats are out of scope. A slide is partitioned into
non-overlapping tiles in row-major order; partial edge tiles are padded
with the reference background white so the padding reads as background
downstream.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .colorspace import REFERENCE_WHITE_RGB

DEFAULT_TILE_SIZE = 256
DOWNSAMPLED_SIZE = 64

_PAD_RGB = np.array(REFERENCE_WHITE_RGB, dtype=np.uint8)

LABELS = ("positive", "negative")
DATASET_IDS = ("internal", "external")


class SlideFormatError(ValueError):
    """Unsupported or undecodable slide file."""


class ManifestError(ValueError):
    """Malformed dataset manifest."""


@dataclass(frozen=True)
class SlideRaster:
    slide_id: str
    pixels: np.ndarray  # (height, width, 3) uint8

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class TileGrid:
    width: int
    height: int
    tile_size: int = DEFAULT_TILE_SIZE

    @property
    def rows(self) -> int:
        return -(-self.height // self.tile_size)

    @property
    def cols(self) -> int:
        return -(-self.width // self.tile_size)

    @property
    def n_tiles(self) -> int:
        return self.rows * self.cols

    def tile_bounds(self, row: int, col: int) -> tuple[int, int, int, int]:
        """(y0, x0, y1, x1) pixel bounds of the tile, clipped to the raster."""
        y0 = row * self.tile_size
        x0 = col * self.tile_size
        return y0, x0, min(y0 + self.tile_size, self.height), min(x0 + self.tile_size, self.width)


def load_slide(path, slide_id: str | None = None) -> SlideRaster:
    """Load a PNG slide, preserving exact pixel values."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"slide file not found: {path}")
    if path.suffix.lower() != ".png":
        raise SlideFormatError(f"unsupported slide format {path.suffix!r} (PNG required): {path}")
    try:
        with Image.open(path) as img:
            if img.mode == "L":
                img = img.convert("RGB")
            if img.mode != "RGB":
                raise SlideFormatError(f"unsupported pixel mode {img.mode!r}: {path}")
            pixels = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise SlideFormatError(f"cannot decode slide {path}: {exc}") from exc
    return SlideRaster(slide_id=slide_id or path.stem, pixels=pixels)


def save_slide(raster: SlideRaster, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(raster.pixels, mode="RGB").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Load a single-channel mask raster; nonzero means masked."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask file not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise SlideFormatError(f"cannot decode mask {path}: {exc}") from exc


def save_mask(mask: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path, format="PNG")


def make_grid(raster: SlideRaster, tile_size: int = DEFAULT_TILE_SIZE) -> TileGrid:
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    return TileGrid(width=raster.width, height=raster.height, tile_size=tile_size)


def pad_to_tiles(raster: SlideRaster, grid: TileGrid) -> np.ndarray:
    """Raster extended with background white to a whole number of tiles."""
    full_h = grid.rows * grid.tile_size
    full_w = grid.cols * grid.tile_size
    if (full_h, full_w) == (raster.height, raster.width):
        return raster.pixels
    padded = np.empty((full_h, full_w, 3), dtype=np.uint8)
    padded[:] = _PAD_RGB
    padded[: raster.height, : raster.width] = raster.pixels
    return padded


def downsample_tile(tile: np.ndarray, out_size: int = DOWNSAMPLED_SIZE) -> np.ndarray:
    """Box-average a (t, t, 3) tile down to (out_size, out_size, 3).

    Each output pixel is the mean of an f x f input block (f = t / out_size),
    rounded half-up, computed in exact integer arithmetic.
    """
    t = tile.shape[0]
    if tile.shape[:2] != (t, t) or t % out_size != 0:
        raise ValueError(f"tile shape {tile.shape} not divisible into {out_size}x{out_size}")
    f = t // out_size
    sums = (
        tile.reshape(out_size, f, out_size, f, 3)
        .astype(np.uint32)
        .sum(axis=(1, 3), dtype=np.uint32)
    )
    q = f * f
    return ((2 * sums + q) // (2 * q)).astype(np.uint8)


def downsampled_tiles(
    raster: SlideRaster,
    grid: TileGrid | None = None,
    out_size: int = DOWNSAMPLED_SIZE,
) -> np.ndarray:
    """All tiles of a slide, downsampled, as (rows*cols, out, out, 3) uint8.

    Tiles are ordered row-major; partial edge tiles are white-padded first.
    """
    grid = grid or make_grid(raster)
    ts = grid.tile_size
    if ts % out_size != 0:
        raise ValueError(f"tile_size {ts} not divisible by downsampled size {out_size}")
    f = ts // out_size
    q = f * f
    padded = pad_to_tiles(raster, grid)
    blocks = padded.reshape(grid.rows, ts, grid.cols, ts, 3)
    sums = (
        blocks.reshape(grid.rows, out_size, f, grid.cols, out_size, f, 3)
        .astype(np.uint32)
        .sum(axis=(2, 5), dtype=np.uint32)
    )
    down = ((2 * sums + q) // (2 * q)).astype(np.uint8)
    return down.transpose(0, 2, 1, 3, 4).reshape(grid.rows * grid.cols, out_size, out_size, 3)


def tile_pixels(raster: SlideRaster, grid: TileGrid, row: int, col: int, pad: bool = True) -> np.ndarray:
    """Native pixels of one tile, white-padded to full size unless pad=False."""
    y0, x0, y1, x1 = grid.tile_bounds(row, col)
    native = raster.pixels[y0:y1, x0:x1]
    if not pad or native.shape[:2] == (grid.tile_size, grid.tile_size):
        return native
    full = np.empty((grid.tile_size, grid.tile_size, 3), dtype=np.uint8)
    full[:] = _PAD_RGB
    full[: native.shape[0], : native.shape[1]] = native
    return full


def apply_artifact_mask(grid: TileGrid, mask: np.ndarray) -> set[tuple[int, int]]:
    """Tiles excluded by an externally supplied artifact mask.

    The mask is either one value per tile (rows x cols) or per-pixel
    (height x width); in the per-pixel case a tile is excluded when more
    than half of its pixels are masked.
    """
    mask = np.asarray(mask)
    if mask.shape == (grid.rows, grid.cols):
        rows, cols = np.nonzero(mask)
        return set(zip(rows.tolist(), cols.tolist()))
    if mask.shape == (grid.height, grid.width):
        excluded = set()
        for row in range(grid.rows):
            for col in range(grid.cols):
                y0, x0, y1, x1 = grid.tile_bounds(row, col)
                patch = mask[y0:y1, x0:x1]
                if np.count_nonzero(patch) * 2 > patch.size:
                    excluded.add((row, col))
        return excluded
    raise ValueError(
        f"mask shape {mask.shape} matches neither tile grid "
        f"{(grid.rows, grid.cols)} nor raster {(grid.height, grid.width)}"
    )


@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    path: Path
    label: str
    dataset_id: str
    artifact_mask_path: Path | None = None


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a tab-separated dataset manifest.

    Fields: slide_id, slide path, label (positive|negative), dataset_id
    (internal|external), optional artifact mask path. '#' starts a comment
    line. Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (4, 5):
            raise ManifestError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields, got {len(fields)}")
        slide_id, slide_path, label, dataset_id = (f.strip() for f in fields[:4])
        if not slide_id:
            raise ManifestError(f"{path}:{lineno}: empty slide_id")
        if slide_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate slide_id {slide_id!r}")
        if label not in LABELS:
            raise ManifestError(f"{path}:{lineno}: label must be one of {LABELS}, got {label!r}")
        if dataset_id not in DATASET_IDS:
            raise ManifestError(f"{path}:{lineno}: dataset_id must be one of {DATASET_IDS}, got {dataset_id!r}")
        mask: Path | None = None
        if len(fields) == 5 and fields[4].strip():
            mask = _resolve(base, fields[4].strip())
        seen.add(slide_id)
        entries.append(
            ManifestEntry(
                slide_id=slide_id,
                path=_resolve(base, slide_path),
                label=label,
                dataset_id=dataset_id,
                artifact_mask_path=mask,
            )
        )
    return entries


def write_manifest(entries, path) -> None:
    """Write a manifest; paths are stored relative to it when possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# slide_id\tpath\tlabel\tdataset_id\tartifact_mask_path"]
    for e in entries:
        fields = [e.slide_id, _relativize(path.parent, e.path), e.label, e.dataset_id]
        if e.artifact_mask_path is not None:
            fields.append(_relativize(path.parent, e.artifact_mask_path))
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n")


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else (base / q)


def _relativize(base: Path, p: Path) -> str:
    try:
        return os.path.relpath(p, base)
    except ValueError:  # different drive on windows
        return str(p)
