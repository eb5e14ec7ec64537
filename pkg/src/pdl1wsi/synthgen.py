"""Deterministic synthetic slide generator with pixel-level ground truth.

Slides are square canvases of near-white background carrying a tile-aligned
tissue block in pink/violet tones, optional near-black artifact patches,
optional stain-colored smudge patches outside the tissue, and stain discs
inside the tissue covering an exact pixel budget. Every draw comes from
per-slide RNG streams, so a config (including its seed) fully determines
the raster.

Color contracts the tests hold the generator to:
  - background stays within a small jitter band around the reference white;
  - every tissue pixel is at distance >= 10 from the reference white;
  - every stain pixel is within distance 5 of the reference brown;
  - dark-artifact pixels sit far enough from white that the slide-level
    outlier rule always fires on a fully covered tile.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import slide_io
from .colorspace import distance_to_brown
from .roi import RoiConfig
from .slide_io import ManifestEntry, SlideRaster

BACKGROUND_RGB = (238, 238, 238)
DARK_RGB = (25, 22, 28)
STAIN_RGB = (117, 89, 67)            # nearest 8-bit color to the reference brown
# cohort hue envelopes overlap: the counterstain shifts between labs while
# slide-to-slide variation within a lab spans a comparable range
TISSUE_RGB = {"internal": (202, 156, 188), "external": (206, 152, 180)}

JITTER_BLOCK = 4                     # jitter field resolution in native pixels
STAIN_MAX_DISTANCE = 4.0             # rejection bound, strictly inside the <=5 contract
POSITIVE_STAIN_FRACTION = 0.01       # label rule: stained tissue fraction >= 1%
_LAYOUT_ATTEMPTS = 200

LABEL_POSITIVE = "positive"
LABEL_NEGATIVE = "negative"


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    canvas: int = 2048
    tile_size: int = 256
    tissue_shape: str = "rect"                    # rect | ellipse
    tissue_rect: tuple[int, int, int, int] | None = None   # (row0, col0, h, w) in tiles
    tissue_tile_range: tuple[int, int] = (4, 5)   # sampled side length when rect is None
    stain_fraction: float = 0.0
    dark_count: int = 0
    dark_tile_size: int = 1
    brown_count: int = 0
    brown_tile_size: int = 3
    jitter: int = 2
    external_palette: bool = False

    def __post_init__(self):
        if self.canvas % self.tile_size != 0 or self.canvas % JITTER_BLOCK != 0:
            raise ValueError("canvas must be a multiple of tile_size and the jitter block")
        if not 0.0 <= self.stain_fraction <= 1.0:
            raise ValueError(f"stain_fraction must lie in [0, 1], got {self.stain_fraction}")
        if self.tissue_shape not in ("rect", "ellipse"):
            raise ValueError(f"unknown tissue shape {self.tissue_shape!r}")
        if min(self.dark_count, self.brown_count, self.jitter) < 0:
            raise ValueError("counts and jitter must be non-negative")
        if min(self.dark_tile_size, self.brown_tile_size) < 1:
            raise ValueError("artifact patch sizes are in whole tiles, >= 1")
        n = self.grid_tiles
        if self.tissue_rect is not None:
            r0, c0, h, w = self.tissue_rect
            if h < 1 or w < 1 or r0 < 0 or c0 < 0 or r0 + h > n or c0 + w > n:
                raise ValueError(f"tissue_rect {self.tissue_rect} does not fit a {n}x{n} grid")
        else:
            lo, hi = self.tissue_tile_range
            if not 1 <= lo <= hi <= n - 2:
                raise ValueError(
                    f"tissue_tile_range {self.tissue_tile_range} must fit the {n}x{n} "
                    "grid interior (one-tile margin)"
                )

    @property
    def grid_tiles(self) -> int:
        return self.canvas // self.tile_size


@dataclass
class SynthGroundTruth:
    tissue_mask: np.ndarray       # (H, W) bool, pixel-level
    stain_mask: np.ndarray        # (H, W) bool, pixel-level
    roi_tiles: np.ndarray         # (rows, cols) bool, expected ROI
    dark_tiles: np.ndarray        # (rows, cols) bool
    brown_tiles: np.ndarray       # (rows, cols) bool
    stained_fraction: float
    label: str

    @property
    def artifact_tiles(self) -> np.ndarray:
        return self.dark_tiles | self.brown_tiles


def _sample_stain_color(rng: np.random.Generator) -> np.ndarray:
    """Near-brown color within the stain distance bound (rejection sampling)."""
    base = np.array(STAIN_RGB, dtype=np.int16)
    while True:
        c = np.clip(base + rng.integers(-6, 7, size=3), 0, 255)
        if float(distance_to_brown(c.astype(np.float64))) <= STAIN_MAX_DISTANCE:
            return c.astype(np.uint8)


def _place_patches(
    rng: np.random.Generator,
    occupied: np.ndarray,
    count: int,
    size: int,
    gap: int,
) -> list[tuple[int, int]]:
    """Top-left tile coords for square patches inside the grid interior.

    Patches never touch the grid border. `gap` extra tiles of clearance are
    kept around each patch (gap 1 stops morphology from merging a patch
    with anything else; gap 0 only forbids overlap). Raises when no
    placement exists.
    """
    n = occupied.shape[0]
    placed = []
    for _ in range(count):
        candidates = []
        for r in range(1, n - size):
            for c in range(1, n - size):
                r0, c0 = max(r - gap, 0), max(c - gap, 0)
                if not occupied[r0:r + size + gap, c0:c + size + gap].any():
                    candidates.append((r, c))
        if not candidates:
            raise ValueError(f"no room for a {size}x{size} patch")
        r, c = candidates[int(rng.integers(len(candidates)))]
        occupied[r:r + size, c:c + size] = True
        placed.append((r, c))
    return placed


def _sample_layout(cfg: SynthConfig, h: int, w: int):
    """Tissue position and artifact placements, retried until feasible.

    Layout draws come from attempt-indexed RNG streams separate from the
    color stream, so a retry never shifts any color or stain draw.
    """
    n = cfg.grid_tiles
    for attempt in range(_LAYOUT_ATTEMPTS):
        rng = np.random.default_rng([cfg.seed, 3_000_000 + attempt])
        if cfg.tissue_rect is not None:
            r0, c0 = cfg.tissue_rect[0], cfg.tissue_rect[1]
        else:
            r0 = 1 + int(rng.integers(n - 1 - h))
            c0 = 1 + int(rng.integers(n - 1 - w))
        occupied = np.zeros((n, n), dtype=bool)
        occupied[r0:r0 + h, c0:c0 + w] = True
        try:
            dark = _place_patches(rng, occupied, cfg.dark_count, cfg.dark_tile_size, gap=0)
            brown = _place_patches(rng, occupied, cfg.brown_count, cfg.brown_tile_size, gap=1)
        except ValueError:
            if cfg.tissue_rect is not None:
                break   # fixed tissue: retrying cannot change anything
            continue
        return (r0, c0, h, w), dark, brown
    raise ValueError(
        f"infeasible config: tissue {h}x{w} plus {cfg.dark_count} dark and "
        f"{cfg.brown_count} stain-colored patches do not fit a {n}x{n} grid"
    )


def _tissue_pixel_mask(cfg: SynthConfig, rect: tuple) -> np.ndarray:
    ts = cfg.tile_size
    r0, c0, h, w = rect
    mask = np.zeros((cfg.canvas, cfg.canvas), dtype=bool)
    if cfg.tissue_shape == "rect":
        mask[r0 * ts:(r0 + h) * ts, c0 * ts:(c0 + w) * ts] = True
        return mask
    # ellipse inscribed in the rect, in pixel-center coordinates
    cy, cx = r0 * ts + (h * ts - 1) / 2, c0 * ts + (w * ts - 1) / 2
    ay, ax = (h * ts - 1) / 2, (w * ts - 1) / 2
    yy, xx = np.ogrid[: cfg.canvas, : cfg.canvas]
    mask[((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0] = True
    return mask


def _paint_stain(
    canvas: np.ndarray,
    tissue_px: np.ndarray,
    tissue_base: np.ndarray,
    cfg: SynthConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Paint stain discs covering exactly round(fraction * tissue area) pixels.

    The first disc is the exact reference-brown 8-bit color so every stained
    slide carries mass in histogram bin 0; later discs draw jittered
    near-brown colors. Overshoot is trimmed from the last disc painted,
    undershoot (pathological geometry) is filled in scan order.
    """
    stain = np.zeros(canvas.shape[:2], dtype=bool)
    tissue_area = int(tissue_px.sum())
    target = int(round(cfg.stain_fraction * tissue_area))
    if target == 0:
        return stain
    ys, xs = np.nonzero(tissue_px)
    r_nominal = max(int(np.sqrt(target / np.pi)), 8)
    last_added = None
    for _ in range(200):
        if int(stain.sum()) >= target:
            break
        i = int(rng.integers(len(ys)))
        cy, cx = int(ys[i]), int(xs[i])
        radius = max(int(r_nominal * rng.uniform(0.35, 0.7)), 8)
        y0, y1 = max(cy - radius, 0), min(cy + radius + 1, canvas.shape[0])
        x0, x1 = max(cx - radius, 0), min(cx + radius + 1, canvas.shape[1])
        yy, xx = np.ogrid[y0:y1, x0:x1]
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        new = disc & tissue_px[y0:y1, x0:x1] & ~stain[y0:y1, x0:x1]
        if not new.any():
            continue
        color = np.array(STAIN_RGB, dtype=np.uint8) if last_added is None else _sample_stain_color(rng)
        canvas[y0:y1, x0:x1][new] = color
        stain[y0:y1, x0:x1] |= new
        last_added = (y0, x0, new.shape, np.flatnonzero(new))
    painted = int(stain.sum())
    if painted < target:
        # geometry starved the disc loop; fill deterministically
        free = np.flatnonzero(tissue_px.ravel() & ~stain.ravel())[: target - painted]
        stain.ravel()[free] = True
        canvas.reshape(-1, 3)[free] = STAIN_RGB
    elif painted > target:
        y0, x0, shape, local_idx = last_added
        drop = local_idx[-(painted - target):]
        sview = stain[y0:y0 + shape[0], x0:x0 + shape[1]].ravel()
        sview[drop] = False
        stain[y0:y0 + shape[0], x0:x0 + shape[1]] = sview.reshape(shape)
        # repaint the trimmed pixels as tissue
        cview = canvas[y0:y0 + shape[0], x0:x0 + shape[1]].reshape(-1, 3)
        cview[drop] = np.clip(
            tissue_base + rng.integers(-cfg.jitter, cfg.jitter + 1, size=(len(drop), 3)),
            0, 255,
        ).astype(np.uint8)
        canvas[y0:y0 + shape[0], x0:x0 + shape[1]] = cview.reshape(shape + (3,))
    assert abs(int(stain.sum()) - target) <= 1
    return stain


def generate_slide(cfg: SynthConfig, slide_id: str | None = None) -> tuple[SlideRaster, SynthGroundTruth]:
    rng = np.random.default_rng(cfg.seed)
    n, ts, size = cfg.grid_tiles, cfg.tile_size, cfg.canvas

    # one jitter field at reduced resolution, shared by background and tissue
    blocks = size // JITTER_BLOCK
    jitter = rng.integers(-cfg.jitter, cfg.jitter + 1, size=(blocks, blocks, 3), dtype=np.int16)
    jitter = np.repeat(np.repeat(jitter, JITTER_BLOCK, axis=0), JITTER_BLOCK, axis=1)

    canvas = np.clip(np.array(BACKGROUND_RGB, dtype=np.int16) + jitter, 0, 255).astype(np.uint8)

    palette = "external" if cfg.external_palette else "internal"
    tissue_base = np.array(TISSUE_RGB[palette], dtype=np.int16) + rng.integers(-12, 13, size=3)

    if cfg.tissue_rect is not None:
        h, w = cfg.tissue_rect[2], cfg.tissue_rect[3]
    else:
        lo, hi = cfg.tissue_tile_range
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
    rect, dark_placed, brown_placed = _sample_layout(cfg, h, w)

    tissue_tiles = np.zeros((n, n), dtype=bool)
    tissue_tiles[rect[0]:rect[0] + rect[2], rect[1]:rect[1] + rect[3]] = True
    tissue_px = _tissue_pixel_mask(cfg, rect)
    canvas[tissue_px] = np.clip(tissue_base + jitter[tissue_px], 0, 255).astype(np.uint8)

    dark_tiles = np.zeros((n, n), dtype=bool)
    for r, c in dark_placed:
        s = cfg.dark_tile_size
        dark_tiles[r:r + s, c:c + s] = True
        patch = np.s_[r * ts:(r + s) * ts, c * ts:(c + s) * ts]
        offset = rng.integers(-3, 4, size=3)
        canvas[patch] = np.clip(
            np.array(DARK_RGB, dtype=np.int16) + offset + jitter[patch], 0, 255
        ).astype(np.uint8)

    brown_tiles = np.zeros((n, n), dtype=bool)
    for r, c in brown_placed:
        s = cfg.brown_tile_size
        brown_tiles[r:r + s, c:c + s] = True
        # exact reference brown: a smudge is the same chromogen as true
        # stain, so no color threshold may separate the two
        canvas[r * ts:(r + s) * ts, c * ts:(c + s) * ts] = np.array(STAIN_RGB, dtype=np.uint8)

    stain_px = _paint_stain(canvas, tissue_px, tissue_base, cfg, rng)

    tissue_area = int(tissue_px.sum())
    stained_fraction = float(stain_px.sum() / tissue_area) if tissue_area else 0.0
    label = LABEL_POSITIVE if stained_fraction >= POSITIVE_STAIN_FRACTION else LABEL_NEGATIVE

    coverage = tissue_px.reshape(n, ts, n, ts).mean(axis=(1, 3))
    roi_tiles = coverage > (1.0 - RoiConfig().f_roi)

    truth = SynthGroundTruth(
        tissue_mask=tissue_px,
        stain_mask=stain_px,
        roi_tiles=roi_tiles,
        dark_tiles=dark_tiles,
        brown_tiles=brown_tiles,
        stained_fraction=stained_fraction,
        label=label,
    )
    raster = SlideRaster(slide_id=slide_id or f"synth_{cfg.seed:08d}", pixels=canvas)
    return raster, truth


def derive_seed(base_seed: int, index: int) -> int:
    """Stable per-slide seed; independent of generation order."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_corpus(
    out_dir,
    n_pos: int,
    n_neg: int,
    dataset_id: str,
    seed: int,
    template: SynthConfig = SynthConfig(),
    stain_fraction_positive: float = 0.05,
    write_truth: bool = True,
) -> Path:
    """Write slides, ground truth, hand-style artifact masks, and a manifest.

    Returns the manifest path. Positive slides get stain_fraction_positive,
    negative slides zero stain; everything else follows the template with a
    per-slide derived seed. Artifact masks (full tiles over every
    stain-colored patch, the way a human would block them out) are written
    only when such patches exist on the slide.
    """
    if n_pos < 0 or n_neg < 0:
        raise ValueError("slide counts must be non-negative")
    if dataset_id not in slide_io.DATASET_IDS:
        raise ValueError(
            f"dataset_id must be one of {slide_io.DATASET_IDS}, got {dataset_id!r}")
    if n_pos > 0 and stain_fraction_positive < POSITIVE_STAIN_FRACTION:
        raise ValueError(
            f"stain_fraction_positive below the {POSITIVE_STAIN_FRACTION} label threshold"
        )
    out_dir = Path(out_dir)
    (out_dir / "slides").mkdir(parents=True, exist_ok=True)
    labels = [LABEL_POSITIVE] * n_pos + [LABEL_NEGATIVE] * n_neg
    entries = []
    for i, label in enumerate(labels):
        slide_id = f"{dataset_id}_{i:03d}"
        cfg = replace(
            template,
            seed=derive_seed(seed, i),
            stain_fraction=stain_fraction_positive if label == LABEL_POSITIVE else 0.0,
        )
        raster, truth = generate_slide(cfg, slide_id=slide_id)
        if truth.label != label:
            raise AssertionError(f"{slide_id}: generator label {truth.label} != requested {label}")
        slide_path = out_dir / "slides" / f"{slide_id}.png"
        slide_io.save_slide(raster, slide_path)

        mask_path = None
        if truth.brown_tiles.any():
            ts = cfg.tile_size
            hand = np.kron(truth.brown_tiles, np.ones((ts, ts), dtype=np.uint8)) * 255
            mask_path = out_dir / "masks" / f"{slide_id}_artifacts.png"
            slide_io.save_mask(hand, mask_path)

        if write_truth:
            slide_io.save_mask(truth.tissue_mask.astype(np.uint8) * 255,
                               out_dir / "truth" / f"{slide_id}_tissue.png")
            slide_io.save_mask(truth.stain_mask.astype(np.uint8) * 255,
                               out_dir / "truth" / f"{slide_id}_stain.png")
            slide_io.save_mask(truth.roi_tiles.astype(np.uint8) * 255,
                               out_dir / "truth" / f"{slide_id}_roi.png")

        entries.append(ManifestEntry(
            slide_id=slide_id,
            path=slide_path,
            label=label,
            dataset_id=dataset_id,
            artifact_mask_path=mask_path,
        ))
    manifest_path = out_dir / "manifest.tsv"
    slide_io.write_manifest(entries, manifest_path)
    return manifest_path


# Benchmark templates. roi-bench keeps the 2048-pixel canvas its consumers
# pin; the smudge-bearing templates use a 10x10 tile grid so a tissue block
# and a 3x3 smudge patch both fit the interior.
PRESETS: dict[str, SynthConfig] = {
    "roi-bench": SynthConfig(canvas=2048, tissue_tile_range=(4, 5), dark_count=2),
    "baseline-bench": SynthConfig(canvas=2048, tissue_tile_range=(4, 6)),
    "artifact-bench": SynthConfig(canvas=2560, tissue_tile_range=(3, 4), brown_count=1),
    "paperlike": SynthConfig(canvas=2560, tissue_tile_range=(3, 4), dark_count=1, brown_count=1),
}


def preset_template(name: str, external: bool = False) -> SynthConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], external_palette=external)
