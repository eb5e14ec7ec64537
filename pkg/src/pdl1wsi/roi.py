"""Tumor region-of-interest identification.

Per slide, every pixel of every downsampled tile gets a color distance to
the reference background white. Pixels far outside the slide's own
distance distribution (beyond a 3-sigma band) are outliers; tiles made
mostly of outliers are dark artifacts. Remaining tiles are scored by
their near-white pixel fraction, binarized against F_ROI, and smoothed
with binary closing then opening. Artifact and externally masked tiles
stay outside the final mask no matter what the morphology does.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import slide_io
from .colorspace import distance_to_white
from .slide_io import SlideRaster, TileGrid


class EmptyRoiError(ValueError):
    """Raised when a slide has no tiles inside the ROI."""


@dataclass(frozen=True)
class RoiConfig:
    f_roi: float = 0.85
    near_white_cutoff: float = 5.0
    outlier_sigma: float = 3.0
    artifact_outlier_fraction: float = 0.8
    tile_size: int = slide_io.DEFAULT_TILE_SIZE
    downsampled_size: int = slide_io.DOWNSAMPLED_SIZE
    selem_size: int = 3
    morph_iterations: int = 1

    def __post_init__(self):
        if not 0.0 <= self.f_roi <= 1.0:
            raise ValueError(f"f_roi must lie in [0, 1], got {self.f_roi}")


@dataclass(frozen=True)
class WhiteStats:
    """Slide-wide mean/std of pixel distances to white (never shared across slides)."""

    mean: float
    std: float
    n_pixels: int

    @classmethod
    def from_distances(cls, distances: np.ndarray) -> "WhiteStats":
        d = np.asarray(distances, dtype=np.float64).ravel()
        if d.size == 0:
            raise ValueError("cannot compute white statistics of an empty slide")
        return cls(mean=float(d.mean()), std=float(d.std()), n_pixels=int(d.size))

    @classmethod
    def merge(cls, parts: list["WhiteStats"]) -> "WhiteStats":
        """Combine per-chunk statistics (associative, for parallel reduction)."""
        parts = [p for p in parts if p.n_pixels]
        if not parts:
            raise ValueError("cannot merge empty statistics")
        n = sum(p.n_pixels for p in parts)
        mean = sum(p.mean * p.n_pixels for p in parts) / n
        second = sum((p.std**2 + p.mean**2) * p.n_pixels for p in parts) / n
        return cls(mean=mean, std=float(np.sqrt(max(second - mean**2, 0.0))), n_pixels=n)


@dataclass
class RoiResult:
    grid: TileGrid
    stats: WhiteStats
    float_mask: np.ndarray      # (rows, cols) float64, NaN on artifact tiles
    artifact: np.ndarray        # (rows, cols) bool, dark-artifact tiles
    external: np.ndarray        # (rows, cols) bool, externally masked tiles
    inside: np.ndarray          # (rows, cols) bool, final ROI

    @property
    def n_inside(self) -> int:
        return int(self.inside.sum())


def white_distances(tiles: np.ndarray) -> np.ndarray:
    """Distance to white for every pixel of a (n, s, s, 3) tile stack."""
    return np.asarray(distance_to_white(tiles.astype(np.float64)))


def compute_white_stats(tiles: np.ndarray) -> WhiteStats:
    """First pass: distance statistics over all pixels of all tiles."""
    if tiles.size == 0:
        raise ValueError("cannot compute white statistics of an empty slide")
    return WhiteStats.from_distances(white_distances(tiles))


def score_tile(distances: np.ndarray, stats: WhiteStats, config: RoiConfig = RoiConfig()) -> tuple[bool, float]:
    """Second pass for one tile: (is_artifact, near-white fraction).

    A pixel is an outlier when |d - mean| > sigma * std (no pixel is, when
    the slide-wide std is zero); the tile is an artifact when outliers
    exceed the artifact fraction. Otherwise f is the fraction of pixels
    closer to white than the cutoff.
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    if stats.std > 0.0:
        outlier_frac = float((np.abs(d - stats.mean) > config.outlier_sigma * stats.std).mean())
        if outlier_frac > config.artifact_outlier_fraction:
            return True, float("nan")
    return False, float((d < config.near_white_cutoff).mean())


def score_tiles(distances: np.ndarray, stats: WhiteStats, config: RoiConfig = RoiConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized scoring of a (n, ...) distance stack -> (artifact, f) arrays."""
    d = np.asarray(distances, dtype=np.float64).reshape(distances.shape[0], -1)
    if stats.std > 0.0:
        outlier_frac = (np.abs(d - stats.mean) > config.outlier_sigma * stats.std).mean(axis=1)
        artifact = outlier_frac > config.artifact_outlier_fraction
    else:
        artifact = np.zeros(d.shape[0], dtype=bool)
    f = (d < config.near_white_cutoff).mean(axis=1)
    f[artifact] = np.nan
    return artifact, f


def binarize(float_mask: np.ndarray, f_roi: float = 0.85) -> np.ndarray:
    """Pre-morphology mask: inside iff f < f_roi (NaN, i.e. artifact, is outside)."""
    if not 0.0 <= f_roi <= 1.0:
        raise ValueError(f"f_roi must lie in [0, 1], got {f_roi}")
    with np.errstate(invalid="ignore"):
        return np.asarray(float_mask) < f_roi


def binary_dilate(mask: np.ndarray, selem_size: int = 3, iterations: int = 1) -> np.ndarray:
    """Dilation with a square structuring element; outside the grid is False."""
    out = np.asarray(mask, dtype=bool)
    r = selem_size // 2
    for _ in range(iterations):
        padded = np.pad(out, r, constant_values=False)
        windows = np.lib.stride_tricks.sliding_window_view(padded, (selem_size, selem_size))
        out = windows.any(axis=(-2, -1))
    return out


def binary_erode(mask: np.ndarray, selem_size: int = 3, iterations: int = 1) -> np.ndarray:
    """Erosion with a square structuring element; outside the grid is False."""
    out = np.asarray(mask, dtype=bool)
    r = selem_size // 2
    for _ in range(iterations):
        padded = np.pad(out, r, constant_values=False)
        windows = np.lib.stride_tricks.sliding_window_view(padded, (selem_size, selem_size))
        out = windows.all(axis=(-2, -1))
    return out


def morph_close_open(mask: np.ndarray, selem_size: int = 3, iterations: int = 1) -> np.ndarray:
    """Closing (dilate, erode) then opening (erode, dilate)."""
    closed = binary_erode(binary_dilate(mask, selem_size, iterations), selem_size, iterations)
    return binary_dilate(binary_erode(closed, selem_size, iterations), selem_size, iterations)


def identify_roi(
    raster: SlideRaster,
    config: RoiConfig = RoiConfig(),
    artifact_mask: np.ndarray | None = None,
) -> RoiResult:
    """Full ROI pipeline for one slide; deterministic."""
    grid = slide_io.make_grid(raster, config.tile_size)
    tiles = slide_io.downsampled_tiles(raster, grid, config.downsampled_size)
    distances = white_distances(tiles)
    stats = WhiteStats.from_distances(distances)
    artifact_flat, f_flat = score_tiles(distances, stats, config)

    shape = (grid.rows, grid.cols)
    artifact = artifact_flat.reshape(shape)
    float_mask = f_flat.reshape(shape)

    external = np.zeros(shape, dtype=bool)
    if artifact_mask is not None:
        for row, col in slide_io.apply_artifact_mask(grid, artifact_mask):
            external[row, col] = True

    pre = binarize(float_mask, config.f_roi) & ~artifact & ~external
    post = morph_close_open(pre, config.selem_size, config.morph_iterations)
    # artifact/external exclusion dominates whatever morphology reconnects
    inside = post & ~artifact & ~external
    return RoiResult(
        grid=grid,
        stats=stats,
        float_mask=float_mask,
        artifact=artifact,
        external=external,
        inside=inside,
    )


def write_roi_mask(result: RoiResult, path, float_sidecar: Path | str | None = None) -> None:
    """Save the final mask (255 = inside) plus a float-mask text sidecar."""
    path = Path(path)
    slide_io.save_mask(result.inside.astype(np.uint8) * 255, path)
    sidecar = Path(float_sidecar) if float_sidecar else path.with_suffix(path.suffix + ".floats.txt")
    lines = []
    for row in result.float_mask:
        lines.append(" ".join("nan" if np.isnan(v) else f"{v:.6f}" for v in row))
    sidecar.write_text("\n".join(lines) + "\n")


def read_roi_mask(path) -> np.ndarray:
    """Load a saved ROI mask back to a boolean grid."""
    return slide_io.load_mask(path) > 0
