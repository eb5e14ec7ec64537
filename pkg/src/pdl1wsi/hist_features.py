"""Brown-distance histogram features and the two-threshold baseline model.

Every pixel of every ROI tile is binned by its color distance to the
reference stain brown into 100 unit-width bins. Raw counts drive the
baseline model (mass ratio below a bin threshold vs a classification
threshold); log-normalized counts are the feature vectors consumed by
the trainable classifiers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import slide_io
from .colorspace import distance_to_brown
from .roi import EmptyRoiError, RoiConfig, RoiResult

NUM_BINS = 100
FEATURE_FILE_VERSION = "pdl1wsi-features v1"
BASELINE_FILE_VERSION = "pdl1wsi-baseline v1"

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class HistogramFeature:
    counts: np.ndarray       # (NUM_BINS,) int64 raw pixel counts
    features: np.ndarray     # (NUM_BINS,) float64 log-normalized
    total_pixels: int

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "HistogramFeature":
        counts = np.asarray(counts, dtype=np.int64)
        return cls(counts=counts, features=log_normalize(counts), total_pixels=int(counts.sum()))


@dataclass(frozen=True)
class BaselineThresholds:
    t_bin: int
    t_cls: float

    def __post_init__(self):
        if not 0 <= self.t_bin < NUM_BINS:
            raise ValueError(f"t_bin must lie in [0, {NUM_BINS - 1}], got {self.t_bin}")
        if not 0.0 <= self.t_cls <= 1.0:
            raise ValueError(f"t_cls must lie in [0, 1], got {self.t_cls}")


def distance_bins(distances: np.ndarray) -> np.ndarray:
    """Unit-width bin indices over [0, 100); distances >= 100 clamp to the last bin."""
    d = np.asarray(distances, dtype=np.float64)
    return np.minimum(np.floor(d), NUM_BINS - 1).astype(np.int64)


def brown_histogram(tiles: np.ndarray, inside: np.ndarray | None = None) -> np.ndarray:
    """Raw 100-bin histogram of distance-to-brown over the ROI tiles.

    tiles: (n, s, s, 3) downsampled tile stack; inside: per-tile bool
    selector (None keeps all). Raises EmptyRoiError when nothing is
    selected.
    """
    tiles = np.asarray(tiles)
    if inside is not None:
        tiles = tiles[np.asarray(inside, dtype=bool).ravel()]
    if tiles.size == 0:
        raise EmptyRoiError("no tiles inside the ROI; slide cannot be featurized")
    d = distance_to_brown(tiles.astype(np.float64))
    return np.bincount(distance_bins(d).ravel(), minlength=NUM_BINS).astype(np.int64)


def featurize_slide(
    raster: slide_io.SlideRaster,
    roi_result: RoiResult,
    config: RoiConfig = RoiConfig(),
) -> HistogramFeature:
    """Histogram feature of one slide restricted to its ROI tiles."""
    tiles = slide_io.downsampled_tiles(raster, roi_result.grid, config.downsampled_size)
    return HistogramFeature.from_counts(brown_histogram(tiles, roi_result.inside.ravel()))


def log_normalize(counts: np.ndarray) -> np.ndarray:
    """features[i] = ln(1 + counts[i]) / ln(1 + total); bounded to [0, 1]."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("cannot normalize a histogram with zero total mass")
    return np.log1p(counts) / np.log1p(total)


def baseline_ratio(counts: np.ndarray, t_bin: int) -> float:
    """Fraction of histogram mass in bins [0..t_bin]."""
    if not 0 <= t_bin < NUM_BINS:
        raise ValueError(f"t_bin must lie in [0, {NUM_BINS - 1}], got {t_bin}")
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("cannot score a histogram with zero total mass")
    return float(counts[: t_bin + 1].sum() / total)


def baseline_predict(counts: np.ndarray, thresholds: BaselineThresholds) -> str:
    """Positive iff the low-bin mass ratio strictly exceeds t_cls."""
    r = baseline_ratio(counts, thresholds.t_bin)
    return POSITIVE if r > thresholds.t_cls else NEGATIVE


def _cls_grid(steps: int) -> np.ndarray:
    return np.arange(steps + 1, dtype=np.float64) / steps


def _positive_mask(labels) -> np.ndarray:
    """Labels as a bool mask; accepts bools or positive/negative strings.

    Anything else is rejected: np.asarray(strings, dtype=bool) would silently
    turn every non-empty string into True.
    """
    arr = np.asarray(labels)
    if arr.dtype == bool:
        return arr
    if arr.dtype.kind in ("U", "S", "O"):
        mask = arr == POSITIVE
        bad = ~(mask | (arr == NEGATIVE))
        if bad.any():
            raise ValueError(f"unknown label {arr[bad][0]!r}")
        return mask
    raise ValueError(
        f"labels must be booleans or {POSITIVE!r}/{NEGATIVE!r} strings, got dtype {arr.dtype}")


def baseline_train(
    counts_rows: np.ndarray,
    labels: np.ndarray,
    t_cls_steps: int = 1000,
) -> BaselineThresholds:
    """Exhaustive grid search maximizing training accuracy.

    Grid: t_bin in 0..99 crossed with t_cls in {0, 1/steps, ..., 1}.
    Ties break toward the smallest t_bin, then the smallest t_cls.
    """
    counts_rows = np.asarray(counts_rows, dtype=np.float64)
    if counts_rows.ndim != 2 or counts_rows.shape[1] != NUM_BINS:
        raise ValueError(f"expected (n, {NUM_BINS}) count rows, got {counts_rows.shape}")
    if counts_rows.shape[0] == 0:
        raise ValueError("empty training set")
    labels = _positive_mask(labels)
    if labels.shape != (counts_rows.shape[0],):
        raise ValueError("labels must align with count rows")
    totals = counts_rows.sum(axis=1)
    if np.any(totals <= 0):
        raise ValueError("every training histogram needs nonzero mass")

    ratios = np.cumsum(counts_rows, axis=1) / totals[:, None]   # (n, NUM_BINS)
    cls_grid = _cls_grid(t_cls_steps)
    # (NUM_BINS, n, steps+1) would be ~4e6 floats for default sizes; do one
    # t_bin row at a time to stay small
    best_acc = -1.0
    best = (0, 0.0)
    n = counts_rows.shape[0]
    for t_bin in range(NUM_BINS):
        preds = ratios[:, t_bin][:, None] > cls_grid[None, :]   # (n, steps+1)
        acc = (preds == labels[:, None]).sum(axis=0) / n
        idx = int(np.argmax(acc))                               # first max: smallest t_cls
        if acc[idx] > best_acc:
            best_acc = float(acc[idx])
            best = (t_bin, float(cls_grid[idx]))
    return BaselineThresholds(t_bin=best[0], t_cls=best[1])


def evaluate_baseline(counts_rows: np.ndarray, labels: np.ndarray, thresholds: BaselineThresholds) -> float:
    """Accuracy of the thresholds on a labeled set of count rows."""
    labels = _positive_mask(labels)
    preds = np.array(
        [baseline_predict(row, thresholds) == POSITIVE for row in np.asarray(counts_rows)]
    )
    return float((preds == labels).mean())


def write_features(path, rows, kind: str) -> None:
    """One line per slide: slide_id then 100 space-separated values."""
    if kind not in ("counts", "lognorm"):
        raise ValueError(f"unknown feature kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {FEATURE_FILE_VERSION}", f"# kind: {kind}"]
    for slide_id, vec in rows:
        vec = np.asarray(vec)
        if vec.shape != (NUM_BINS,):
            raise ValueError(f"{slide_id}: expected {NUM_BINS} values, got {vec.shape}")
        if kind == "counts":
            body = " ".join(str(int(v)) for v in vec)
        else:
            body = " ".join(f"{float(v):.17g}" for v in vec)
        lines.append(f"{slide_id} {body}")
    path.write_text("\n".join(lines) + "\n")


def read_features(path) -> tuple[str, list[tuple[str, np.ndarray]]]:
    """Returns (kind, [(slide_id, vector)]); counts load as int64, lognorm as float64."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].lstrip("# ").strip() != FEATURE_FILE_VERSION:
        raise ValueError(f"{path}: not a feature file (bad or missing version line)")
    if len(lines) < 2 or not lines[1].startswith("# kind:"):
        raise ValueError(f"{path}: missing kind header")
    kind = lines[1].split(":", 1)[1].strip()
    if kind not in ("counts", "lognorm"):
        raise ValueError(f"{path}: unknown feature kind {kind!r}")
    dtype = np.int64 if kind == "counts" else np.float64
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 1 + NUM_BINS:
            raise ValueError(f"{path}:{lineno}: expected slide_id plus {NUM_BINS} values")
        rows.append((fields[0], np.array([float(v) for v in fields[1:]], dtype=dtype)))
    return kind, rows


def write_baseline(thresholds: BaselineThresholds, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        f"{BASELINE_FILE_VERSION}\nt_bin {thresholds.t_bin}\nt_cls {thresholds.t_cls:.6f}\n"
    )


def read_baseline(path) -> BaselineThresholds:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != BASELINE_FILE_VERSION:
        raise ValueError(f"{path}: not a baseline model file")
    fields = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, value = line.partition(" ")
        fields[key] = value
    try:
        return BaselineThresholds(t_bin=int(fields["t_bin"]), t_cls=float(fields["t_cls"]))
    except KeyError as exc:
        raise ValueError(f"{path}: missing field {exc}") from exc
