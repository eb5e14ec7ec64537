"""Slide-level aggregation of tile embeddings.

Two representations: the mean of a slide's tile embeddings, or a cluster
occupancy distribution. For the latter, k-means (seeded k-means++ init,
Lloyd iterations) is fit on training tiles, then each training WSI keeps
only its closest t_op percent of tiles; a cluster's radius is the largest
distance of any retained tile assigned to it. At evaluation time a tile
joins its nearest cluster if it lies within that radius, otherwise it
falls into a trailing outlier bin, giving a (K+1)-long distribution.

Centroids are frozen after fitting; evaluation never mutates the model.
All math is float64 Euclidean.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .util import read_exact

DEFAULT_K = 256
DEFAULT_T_OP = 90.0
LLOYD_TOL = 1e-6
LLOYD_MAX_ITER = 300

MODEL_MAGIC = b"PDL1CLU\x00"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray  # (K, d) float64
    radii: np.ndarray      # (K,) float64
    t_op: float
    seed: int

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        r = np.asarray(self.radii, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centroids must be a (K, d) array with K >= 1")
        if r.shape != (c.shape[0],):
            raise ValueError("radii must have one entry per centroid")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("radii must be finite and non-negative")
        if not 0.0 < self.t_op <= 100.0:
            raise ValueError("t_op must lie in (0, 100]")
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "radii", r)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _as_points(embeddings, what: str = "embeddings") -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"{what} must be a non-empty (n, d) array, got shape {x.shape}")
    return x


def average_aggregate(embeddings) -> np.ndarray:
    """Component-wise mean of a slide's tile embeddings."""
    return _as_points(embeddings).mean(axis=0)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, K) squared Euclidean distances; expansion trick, clamped at 0."""
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * (x @ centroids.T)
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Seeded k-means++ seeding: first centroid uniform, then each next
    drawn with probability proportional to squared distance from the
    nearest centroid chosen so far."""
    x = _as_points(x)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= K <= n points, got K={k}, n={n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = np.square(x - centroids[0]).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # every remaining point coincides with a centroid
            idx = int(rng.integers(n))
        else:
            r = rng.uniform(0.0, total)
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        centroids[i] = x[idx]
        d2 = np.minimum(d2, np.square(x - centroids[i]).sum(axis=1))
    return centroids


def lloyd(x: np.ndarray, centroids: np.ndarray,
          tol: float = LLOYD_TOL, max_iter: int = LLOYD_MAX_ITER):
    """Lloyd iterations from given start centroids until the largest
    centroid movement drops below tol. A cluster that loses all members is
    re-seeded (in ascending cluster order) to the point currently farthest
    from its assigned centroid. Returns (centroids, assignments)."""
    x = _as_points(x)
    centroids = np.array(centroids, dtype=np.float64)
    k = centroids.shape[0]
    assign = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        assign = d2.argmin(axis=1)
        new = np.empty_like(centroids)
        counts = np.bincount(assign, minlength=k)
        for c in range(k):
            if counts[c] == 0:
                far = int(np.sqrt(d2[np.arange(x.shape[0]), assign]).argmax())
                new[c] = x[far]
                assign[far] = c
                d2[far, :] = np.inf
                d2[far, c] = 0.0
                counts[c] = 1
            else:
                new[c] = x[assign == c].mean(axis=0)
        movement = np.sqrt(np.square(new - centroids).sum(axis=1)).max()
        centroids = new
        if movement < tol:
            break
    assign = _sq_dists(x, centroids).argmin(axis=1)
    return centroids, assign


def kmeans_fit(embeddings, k: int = DEFAULT_K, seed: int = 0,
               tol: float = LLOYD_TOL, max_iter: int = LLOYD_MAX_ITER) -> np.ndarray:
    """Seeded k-means over all training tile embeddings; returns centroids."""
    x = _as_points(embeddings)
    if x.shape[0] < k:
        raise ValueError(f"need at least K={k} points, got {x.shape[0]}")
    return lloyd(x, kmeans_pp_init(x, k, seed), tol=tol, max_iter=max_iter)[0]


def retained_count(n: int, t_op: float) -> int:
    """Per-WSI retention rule: keep the closest ceil(t_op/100 * n) tiles."""
    return math.ceil(t_op / 100.0 * n)


def prune_and_radii(slide_groups: Sequence[np.ndarray], centroids: np.ndarray,
                    t_op: float = DEFAULT_T_OP) -> np.ndarray:
    """Per-cluster radii after per-WSI percentile pruning.

    Every WSI independently ranks its tiles by distance to their assigned
    centroid and keeps the closest t_op percent (ceil rule). Each cluster's
    radius is the maximum distance over all retained tiles assigned to it;
    clusters that retain nothing get radius 0.
    """
    if not 0.0 < t_op <= 100.0:
        raise ValueError("t_op must lie in (0, 100]")
    centroids = np.asarray(centroids, dtype=np.float64)
    k = centroids.shape[0]
    radii = np.zeros(k, dtype=np.float64)
    for group in slide_groups:
        x = _as_points(group, "slide group")
        d2 = _sq_dists(x, centroids)
        assign = d2.argmin(axis=1)
        dist = np.sqrt(d2[np.arange(x.shape[0]), assign])
        order = np.argsort(dist, kind="stable")
        keep = order[: retained_count(x.shape[0], t_op)]
        np.maximum.at(radii, assign[keep], dist[keep])
    return radii


def fit_cluster_model(slide_groups: Sequence[np.ndarray], k: int = DEFAULT_K,
                      t_op: float = DEFAULT_T_OP, seed: int = 0) -> ClusterModel:
    """Fit centroids on the pooled training tiles, then derive radii."""
    groups = [_as_points(g, "slide group") for g in slide_groups]
    if not groups:
        raise ValueError("no slide groups to fit on")
    pooled = np.concatenate(groups, axis=0)
    centroids = kmeans_fit(pooled, k=k, seed=seed)
    radii = prune_and_radii(groups, centroids, t_op=t_op)
    return ClusterModel(centroids=centroids, radii=radii, t_op=float(t_op), seed=seed)


def cluster_distribution(embeddings, model: ClusterModel) -> np.ndarray:
    """Fraction of the slide's tiles per cluster, outlier bin last.

    A tile joins its nearest centroid when its distance is within that
    cluster's radius; otherwise it counts toward the trailing outlier bin.
    The result has K+1 entries summing to 1.
    """
    x = _as_points(embeddings)
    d2 = _sq_dists(x, model.centroids)
    assign = d2.argmin(axis=1)
    dist = np.sqrt(d2[np.arange(x.shape[0]), assign])
    outlier = dist > model.radii[assign]
    counts = np.bincount(assign[~outlier], minlength=model.k).astype(np.float64)
    dist_vec = np.append(counts, float(outlier.sum()))
    return dist_vec / x.shape[0]


# -------------------------------------------------------------- model io

def save_cluster_model(model: ClusterModel, path) -> None:
    """Versioned binary: magic, version, K, dim, t_op, seed, centroids,
    then radii, all little-endian float64."""
    with open(Path(path), "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<II", model.k, model.centroids.shape[1]))
        fh.write(struct.pack("<d", model.t_op))
        fh.write(struct.pack("<q", model.seed))
        fh.write(np.ascontiguousarray(model.centroids, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.radii, dtype="<f8").tobytes())


def load_cluster_model(path) -> ClusterModel:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: not a cluster model file (bad magic)")
        (version,) = struct.unpack("<I", read_exact(fh, 4, path))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model format version {version}")
        k, dim = struct.unpack("<II", read_exact(fh, 8, path))
        (t_op,) = struct.unpack("<d", read_exact(fh, 8, path))
        (seed,) = struct.unpack("<q", read_exact(fh, 8, path))
        centroids = np.frombuffer(read_exact(fh, 8 * k * dim, path), dtype="<f8")
        radii = np.frombuffer(read_exact(fh, 8 * k, path), dtype="<f8")
    return ClusterModel(
        centroids=centroids.reshape(k, dim).copy(),
        radii=radii.copy(),
        t_op=t_op,
        seed=int(seed),
    )


VECTOR_FILE_VERSION = "pdl1wsi-vectors v1"
VECTOR_KINDS = ("mean", "cluster")


def write_vectors(path, rows, kind: str) -> None:
    """One line per slide: slide_id then d space-separated reals."""
    if kind not in VECTOR_KINDS:
        raise ValueError(f"unknown vector kind {kind!r}")
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    dim = np.asarray(rows[0][1]).shape[0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {VECTOR_FILE_VERSION}", f"# kind: {kind}", f"# dim: {dim}"]
    for slide_id, vec in rows:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (dim,):
            raise ValueError(f"{slide_id}: expected {dim} values, got {vec.shape}")
        lines.append(slide_id + " " + " ".join(f"{v:.17g}" for v in vec))
    path.write_text("\n".join(lines) + "\n")


def read_vectors(path) -> tuple[str, list[tuple[str, np.ndarray]]]:
    """Returns (kind, [(slide_id, float64 vector)])."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].lstrip("# ").strip() != VECTOR_FILE_VERSION:
        raise ValueError(f"{path}: not a vector file (bad or missing version line)")
    if len(lines) < 3 or not lines[1].startswith("# kind:") or not lines[2].startswith("# dim:"):
        raise ValueError(f"{path}: missing kind or dim header")
    kind = lines[1].split(":", 1)[1].strip()
    if kind not in VECTOR_KINDS:
        raise ValueError(f"{path}: unknown vector kind {kind!r}")
    dim = int(lines[2].split(":", 1)[1])
    rows = []
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 1 + dim:
            raise ValueError(f"{path}:{lineno}: expected slide_id plus {dim} values")
        rows.append((fields[0], np.array([float(v) for v in fields[1:]], dtype=np.float64)))
    return kind, rows
