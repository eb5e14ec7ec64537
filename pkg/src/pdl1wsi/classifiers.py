"""Slide-level classifiers over histogram or embedding features.

Both model families are implemented here directly: a random forest
(bootstrap sampling, Gini splits, sqrt(d) feature subsampling per split,
majority vote) and a soft-margin SVM trained by sequential pairwise
optimization of the dual, with linear and RBF kernels. Hyperparameters
are chosen by exhaustive grid search over a stratified seeded k-fold
split, ties broken by grid order, then the winner is retrained on the
full training set.

Labels are +1 (positive) and -1 (negative) throughout; a decision value
of exactly zero classifies as negative. SVM features are standardized
with statistics from the training rows only; random forests consume raw
features.
"""

from __future__ import annotations

import configparser
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .util import read_exact

LABEL_POSITIVE = "positive"
LABEL_NEGATIVE = "negative"

KKT_TOL = 1e-3
SVM_MAX_ITER = 100_000
# alpha closer than this to a box bound counts as sitting on it
ALPHA_EDGE = 1e-8

RF_MAGIC = b"PDL1RFM\x00"
RF_VERSION = 1
SVM_MAGIC = b"PDL1SVM\x00"
SVM_VERSION = 1

CV_FOLDS = 6


class SvmConvergenceError(RuntimeError):
    pass


def label_to_int(name: str) -> int:
    if name == LABEL_POSITIVE:
        return 1
    if name == LABEL_NEGATIVE:
        return -1
    raise ValueError(f"unknown label {name!r}")


def label_to_str(value: int) -> str:
    return LABEL_POSITIVE if value > 0 else LABEL_NEGATIVE


@dataclass(frozen=True)
class LabeledFeatureSet:
    """Feature matrix plus per-slide labels, aligned by row."""

    slide_ids: tuple[str, ...]
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int8, +1 or -1

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int8)
        if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] == 0:
            raise ValueError(f"features must be a non-empty (n, d) matrix, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        n = feats.shape[0]
        if len(self.slide_ids) != n or labels.shape != (n,):
            raise ValueError("slide_ids, features and labels must have matching lengths")
        if len(set(self.slide_ids)) != n:
            raise ValueError("duplicate slide_ids")
        if not np.all(np.isin(labels, (-1, 1))):
            raise ValueError("labels must be +1 or -1")
        object.__setattr__(self, "slide_ids", tuple(self.slide_ids))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[str, np.ndarray, str]]) -> "LabeledFeatureSet":
        """rows: (slide_id, vector, 'positive'|'negative')."""
        if not rows:
            raise ValueError("no rows")
        ids = tuple(r[0] for r in rows)
        feats = np.stack([np.asarray(r[1], dtype=np.float64) for r in rows])
        labels = np.array([label_to_int(r[2]) for r in rows], dtype=np.int8)
        return cls(slide_ids=ids, features=feats, labels=labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "LabeledFeatureSet":
        indices = np.asarray(indices)
        return LabeledFeatureSet(
            slide_ids=tuple(self.slide_ids[i] for i in indices),
            features=self.features[indices],
            labels=self.labels[indices],
        )


def _require_both_classes(labels: np.ndarray) -> None:
    if np.all(labels == labels[0]):
        raise ValueError("training data contains a single class")


# ---------------------------------------------------------------- random forest

@dataclass(frozen=True)
class RfParams:
    n_trees: int = 100
    max_depth: int | None = None  # None is unbounded
    min_leaf: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")


@dataclass(frozen=True)
class DecisionTree:
    """Flat node arrays. feature[i] == -1 marks a leaf; votes[i] is
    (negative, positive) training counts at the node."""

    feature: np.ndarray  # (m,) int32
    threshold: np.ndarray  # (m,) float64
    left: np.ndarray  # (m,) int32
    right: np.ndarray  # (m,) int32
    votes: np.ndarray  # (m, 2) uint32


@dataclass(frozen=True)
class RandomForestModel:
    params: RfParams
    trees: tuple[DecisionTree, ...]
    bootstrap: tuple[np.ndarray, ...]  # training row indices drawn per tree
    n_features: int
    seed: int


class _TreeBuilder:
    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.votes: list[tuple[int, int]] = []

    def add(self, votes) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.votes.append(votes)
        return len(self.feature) - 1

    def finish(self) -> DecisionTree:
        return DecisionTree(
            feature=np.array(self.feature, dtype=np.int32),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int32),
            right=np.array(self.right, dtype=np.int32),
            votes=np.array(self.votes, dtype=np.uint32).reshape(-1, 2),
        )


def _best_split(x: np.ndarray, y01: np.ndarray, feats: np.ndarray, min_leaf: int):
    """Lowest weighted child Gini over candidate features and cut points.

    Returns (feature, threshold, left_mask) or None. Ties resolve to the
    earliest feature in feats, then the earliest cut.
    """
    n = x.shape[0]
    sub = x[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    sv = np.take_along_axis(sub, order, axis=0)
    sy = y01[order]
    cum_pos = np.cumsum(sy, axis=0)
    total_pos = int(cum_pos[-1, 0])

    left_n = np.arange(1, n, dtype=np.float64)[:, None]
    right_n = n - left_n
    left_pos = cum_pos[:-1].astype(np.float64)
    right_pos = total_pos - left_pos
    pl = left_pos / left_n
    pr = right_pos / right_n
    gini_left = 1.0 - pl * pl - (1.0 - pl) * (1.0 - pl)
    gini_right = 1.0 - pr * pr - (1.0 - pr) * (1.0 - pr)
    weighted = (left_n * gini_left + right_n * gini_right) / n

    valid = (sv[1:] > sv[:-1]) & (left_n >= min_leaf) & (right_n >= min_leaf)
    if not valid.any():
        return None
    weighted = np.where(valid, weighted, np.inf)

    # column-major argmin so the feature order wins ties before cut position
    flat = int(np.argmin(weighted.T))
    col, cut = divmod(flat, n - 1)

    p_node = total_pos / n
    parent = 1.0 - p_node * p_node - (1.0 - p_node) * (1.0 - p_node)
    if parent - weighted[cut, col] <= 1e-12:
        return None

    a, b = sv[cut, col], sv[cut + 1, col]
    thr = (a + b) / 2.0
    if not (a <= thr < b):  # midpoint rounded onto b
        thr = a
    f = int(feats[col])
    return f, thr, x[:, f] <= thr


def _grow_tree(x, y01, min_leaf, max_depth, n_per_split, rng) -> DecisionTree:
    builder = _TreeBuilder()

    def build(rows: np.ndarray, depth: int) -> int:
        ys = y01[rows]
        pos = int(ys.sum())
        votes = (len(rows) - pos, pos)
        node = builder.add(votes)
        if pos in (0, len(rows)) or len(rows) < 2 * min_leaf:
            return node
        if max_depth is not None and depth >= max_depth:
            return node
        feats = rng.permutation(x.shape[1])[:n_per_split]
        split = _best_split(x[rows], ys, feats, min_leaf)
        if split is None:
            return node
        f, thr, left_mask = split
        builder.feature[node] = f
        builder.threshold[node] = thr
        builder.left[node] = build(rows[left_mask], depth + 1)
        builder.right[node] = build(rows[~left_mask], depth + 1)
        return node

    build(np.arange(x.shape[0]), 0)
    return builder.finish()


def rf_train(data: LabeledFeatureSet, params: RfParams = RfParams(), seed: int = 0) -> RandomForestModel:
    if data.n < 2:
        raise ValueError("need at least 2 rows to train")
    _require_both_classes(data.labels)
    y01 = (data.labels > 0).astype(np.int64)
    n_per_split = max(1, int(math.sqrt(data.dim)))
    trees = []
    bootstrap = []
    for t in range(params.n_trees):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 6, t]))
        idx = rng.integers(0, data.n, size=data.n)
        trees.append(_grow_tree(data.features[idx], y01[idx], params.min_leaf,
                                params.max_depth, n_per_split, rng))
        bootstrap.append(idx.astype(np.int64))
    return RandomForestModel(params=params, trees=tuple(trees),
                             bootstrap=tuple(bootstrap), n_features=data.dim, seed=seed)


def tree_predict(tree: DecisionTree, features: np.ndarray) -> np.ndarray:
    """Per-row +1/-1 from one tree; leaf ties go negative."""
    features = np.asarray(features, dtype=np.float64)
    out = np.empty(features.shape[0], dtype=np.int8)
    for r in range(features.shape[0]):
        node = 0
        while tree.feature[node] >= 0:
            if features[r, tree.feature[node]] <= tree.threshold[node]:
                node = tree.left[node]
            else:
                node = tree.right[node]
        neg, pos = tree.votes[node]
        out[r] = 1 if pos > neg else -1
    return out


def rf_predict(model: RandomForestModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.n_features:
        raise ValueError(f"expected (n, {model.n_features}) features, got {features.shape}")
    total = np.zeros(features.shape[0], dtype=np.int64)
    for tree in model.trees:
        total += tree_predict(tree, features)
    return np.where(total > 0, 1, -1).astype(np.int8)


def rf_oob_predict(model: RandomForestModel, features: np.ndarray) -> np.ndarray:
    """Out-of-bag vote per training row; 0 where no tree left the row out."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    total = np.zeros(n, dtype=np.int64)
    covered = np.zeros(n, dtype=bool)
    for tree, idx in zip(model.trees, model.bootstrap):
        oob = np.setdiff1d(np.arange(n), idx)
        if oob.size == 0:
            continue
        total[oob] += tree_predict(tree, features[oob])
        covered[oob] = True
    out = np.where(total > 0, 1, -1).astype(np.int8)
    out[~covered] = 0
    return out


# ------------------------------------------------------------------------- svm

@dataclass(frozen=True)
class SvmParams:
    c: float = 1.0
    kernel: str = "linear"  # "linear" or "rbf"
    gamma: object = None  # None (linear), "auto" = 1/d, "scale" = 1/(d*var), or a float
    standardize: bool = True
    tol: float = KKT_TOL
    max_iter: int = SVM_MAX_ITER

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("C must be positive")
        if self.kernel not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "rbf":
            if self.gamma is None:
                raise ValueError("rbf kernel needs gamma")
            if isinstance(self.gamma, (int, float)) and self.gamma <= 0:
                raise ValueError("gamma must be positive")
            if isinstance(self.gamma, str) and self.gamma not in ("auto", "scale"):
                raise ValueError(f"unknown gamma rule {self.gamma!r}")


@dataclass(frozen=True)
class SvmModel:
    kernel: str
    gamma: float  # resolved; 0.0 for linear
    c: float
    support_vectors: np.ndarray  # (n_sv, d), in standardized space
    dual_coef: np.ndarray  # (n_sv,), alpha_i * y_i, within [-C, C]
    bias: float
    support_indices: np.ndarray  # (n_sv,) rows of the training set
    mean: np.ndarray  # (d,) standardization shift
    scale: np.ndarray  # (d,) standardization divisor, 1 where training std was 0
    kkt_violation: float  # largest violation on the training set at convergence
    seed: int

    @property
    def n_features(self) -> int:
        return self.support_vectors.shape[1]


def _kernel_matrix(a: np.ndarray, b: np.ndarray, kernel: str, gamma: float) -> np.ndarray:
    if kernel == "linear":
        return a @ b.T
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.exp(-gamma * np.maximum(d2, 0.0))


def _resolve_gamma(gamma, x: np.ndarray) -> float:
    if isinstance(gamma, str):
        d = x.shape[1]
        if gamma == "auto":
            return 1.0 / d
        var = float(x.var())
        return 1.0 / (d * var) if var > 0 else 1.0 / d
    return float(gamma)


def _smo_solve(k: np.ndarray, y: np.ndarray, c: float, tol: float, max_iter: int) -> np.ndarray:
    """Dual ascent by repeatedly optimizing the maximal violating pair.

    Tracks g = K (alpha * y), the decision values without bias. For every
    point v_i = y_i - g_i is the bias that would put it exactly on the
    margin; optimality holds when no point that can push its multiplier up
    demands a larger bias than one that can push down. Stopping at half the
    tolerance leaves the final margin violations safely inside it.
    """
    n = len(y)
    alphas = np.zeros(n)
    g = np.zeros(n)
    stop_gap = 0.5 * tol
    snap = 1e-12 * max(1.0, c)
    diag = np.diagonal(k)
    for it in range(max_iter):
        if it and it % 1000 == 0:  # shed drift from the incremental updates
            g = k @ (alphas * y)
        v = y - g
        can_up = np.where(y > 0, alphas < c, alphas > 0)
        can_low = np.where(y > 0, alphas > 0, alphas < c)
        i = int(np.argmax(np.where(can_up, v, -np.inf)))
        v_low = np.where(can_low, v, np.inf)
        if v[i] - float(v_low.min()) <= stop_gap:
            break
        # second-order partner: the admissible j with the largest certain
        # decrease (v_i - v_j)^2 / (K_ii + K_jj - 2 K_ij), which avoids the
        # slow zigzag that picking the plain minimum is prone to
        quad = np.maximum(diag[i] + diag - 2.0 * k[i], 1e-12)
        admissible = can_low & (v < v[i])
        gain = np.where(admissible, (v[i] - v) ** 2 / quad, -np.inf)
        j = int(np.argmax(gain))
        a_i, a_j = alphas[i], alphas[j]
        if y[i] != y[j]:
            lo, hi = max(0.0, a_j - a_i), min(c, c + a_j - a_i)
        else:
            lo, hi = max(0.0, a_i + a_j - c), min(c, a_i + a_j)
        eta = 2.0 * k[i, j] - k[i, i] - k[j, j]
        if eta >= 0:  # coincident points; step straight to the box edge
            eta = -1e-12
        a_j_new = float(np.clip(a_j - y[j] * (v[j] - v[i]) / eta, lo, hi))
        a_i_new = a_i + y[i] * y[j] * (a_j - a_j_new)
        if a_i_new < snap:
            a_i_new = 0.0
        elif a_i_new > c - snap:
            a_i_new = c
        g += k[:, i] * (y[i] * (a_i_new - a_i)) + k[:, j] * (y[j] * (a_j_new - a_j))
        alphas[i], alphas[j] = a_i_new, a_j_new
    return alphas


def _optimal_bias(alphas: np.ndarray, y: np.ndarray, k: np.ndarray, c: float) -> float:
    """Bias consistent with the final multipliers. Interior support vectors
    pin it exactly; otherwise it sits mid-way in the feasible interval that
    the bound-riding points allow."""
    g = (alphas * y) @ k
    interior = (alphas > ALPHA_EDGE) & (alphas < c - ALPHA_EDGE)
    if interior.any():
        return float(np.mean(y[interior] - g[interior]))
    v = y - g  # per-point bias making that point sit exactly on the margin
    at_zero = alphas <= ALPHA_EDGE
    at_c = alphas >= c - ALPHA_EDGE
    lowers = v[(at_zero & (y > 0)) | (at_c & (y < 0))]
    uppers = v[(at_zero & (y < 0)) | (at_c & (y > 0))]
    if lowers.size and uppers.size:
        return float((lowers.max() + uppers.min()) / 2.0)
    if lowers.size:
        return float(lowers.max())
    if uppers.size:
        return float(uppers.min())
    return 0.0


def _max_kkt_violation(alphas, margins, c, tol_edge=ALPHA_EDGE) -> float:
    """Worst slack across the three KKT cases; 0 means exactly satisfied."""
    at_zero = alphas <= tol_edge
    at_c = alphas >= c - tol_edge
    interior = ~(at_zero | at_c)
    viol = np.zeros_like(margins)
    viol[at_zero] = np.maximum(0.0, 1.0 - margins[at_zero])
    viol[at_c] = np.maximum(0.0, margins[at_c] - 1.0)
    viol[interior] = np.abs(margins[interior] - 1.0)
    return float(viol.max()) if viol.size else 0.0


def svm_train(data: LabeledFeatureSet, params: SvmParams = SvmParams(), seed: int = 0) -> SvmModel:
    _require_both_classes(data.labels)
    x = data.features
    if params.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        mean = np.zeros(data.dim)
        scale = np.ones(data.dim)
    xs = (x - mean) / scale
    y = data.labels.astype(np.float64)
    n = data.n
    c = float(params.c)
    tol = params.tol

    gamma = _resolve_gamma(params.gamma, xs) if params.kernel == "rbf" else 0.0
    k = _kernel_matrix(xs, xs, params.kernel, gamma)

    alphas = _smo_solve(k, y, c, tol, params.max_iter)
    b = _optimal_bias(alphas, y, k, c)
    margins = y * ((alphas * y) @ k + b)
    violation = _max_kkt_violation(alphas, margins, c)
    if violation > tol:
        raise SvmConvergenceError(
            f"dual optimization hit the {params.max_iter} pair-update cap with "
            f"max KKT violation {violation:.3e} (tolerance {tol:g})"
        )

    support = np.flatnonzero(alphas > 1e-12)
    return SvmModel(
        kernel=params.kernel,
        gamma=gamma,
        c=c,
        support_vectors=xs[support].copy(),
        dual_coef=(alphas * y)[support].copy(),
        bias=float(b),
        support_indices=support.astype(np.int64),
        mean=mean.copy(),
        scale=scale.copy(),
        kkt_violation=violation,
        seed=seed,
    )


def svm_decision(model: SvmModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.n_features:
        raise ValueError(f"expected (n, {model.n_features}) features, got {features.shape}")
    xs = (features - model.mean) / model.scale
    k = _kernel_matrix(xs, model.support_vectors, model.kernel, model.gamma)
    return k @ model.dual_coef + model.bias


def svm_predict(model: SvmModel, features: np.ndarray) -> np.ndarray:
    return np.where(svm_decision(model, features) > 0, 1, -1).astype(np.int8)


def svm_kkt_violation(model: SvmModel, data: LabeledFeatureSet) -> float:
    """Recompute the worst KKT slack of model on its own training set."""
    alphas = np.zeros(data.n)
    alphas[model.support_indices] = model.dual_coef * data.labels[model.support_indices]
    margins = data.labels * svm_decision(model, data.features)
    return _max_kkt_violation(alphas, margins, model.c)


# ------------------------------------------------------------------ grid search

def predict(model, features: np.ndarray) -> np.ndarray:
    if isinstance(model, RandomForestModel):
        return rf_predict(model, features)
    if isinstance(model, SvmModel):
        return svm_predict(model, features)
    raise TypeError(f"not a classifier model: {type(model).__name__}")


def _train(family: str, data: LabeledFeatureSet, params, seed: int):
    if family == "rf":
        return rf_train(data, params, seed=seed)
    if family == "svm":
        return svm_train(data, params, seed=seed)
    raise ValueError(f"unknown model family {family!r}")


def default_grid(family: str) -> tuple:
    if family == "rf":
        return tuple(
            RfParams(n_trees=t, max_depth=d, min_leaf=m)
            for t in (100, 300) for d in (None, 8, 16) for m in (1, 3)
        )
    if family == "svm":
        cells = []
        for c in (0.1, 1.0, 10.0, 100.0):
            cells.append(SvmParams(c=c, kernel="linear"))
            for g in ("auto", "scale"):
                cells.append(SvmParams(c=c, kernel="rbf", gamma=g))
        return tuple(cells)
    raise ValueError(f"unknown model family {family!r}")


def parse_grid(path, family: str) -> tuple:
    """Grid file: one section per family, each key listing its values.

    [rf]                      [svm]
    trees = 100 300           c = 0.1 1 10 100
    max_depth = none 8 16     kernel = linear rbf
    min_leaf = 1 3            gamma = auto scale
    """
    cfg = configparser.ConfigParser()
    path = Path(path)
    read = cfg.read(path)
    if not read:
        raise ValueError(f"{path}: cannot read grid file")
    if family not in cfg:
        raise ValueError(f"{path}: missing [{family}] section")
    section = cfg[family]

    def values(key):
        if key not in section:
            raise ValueError(f"{path}: [{family}] is missing {key!r}")
        vals = section[key].split()
        if not vals:
            raise ValueError(f"{path}: [{family}] {key!r} lists no values")
        return vals

    if family == "rf":
        trees = [int(v) for v in values("trees")]
        depths = [None if v.lower() == "none" else int(v) for v in values("max_depth")]
        leaves = [int(v) for v in values("min_leaf")]
        return tuple(
            RfParams(n_trees=t, max_depth=d, min_leaf=m)
            for t in trees for d in depths for m in leaves
        )
    if family == "svm":
        cs = [float(v) for v in values("c")]
        kernels = values("kernel")
        for kern in kernels:
            if kern not in ("linear", "rbf"):
                raise ValueError(f"{path}: unknown kernel {kern!r}")
        gammas = []
        if "rbf" in kernels:
            for v in values("gamma"):
                gammas.append(v if v in ("auto", "scale") else float(v))
        cells = []
        for c in cs:
            for kern in kernels:
                if kern == "linear":
                    cells.append(SvmParams(c=c, kernel="linear"))
                else:
                    cells.extend(SvmParams(c=c, kernel="rbf", gamma=g) for g in gammas)
        return tuple(cells)
    raise ValueError(f"unknown model family {family!r}")


@dataclass(frozen=True)
class GridSearchReport:
    family: str
    cells: tuple
    fold_accuracies: np.ndarray  # (n_cells, folds)
    mean_accuracy: np.ndarray  # (n_cells,)
    chosen_index: int
    folds: int
    seed: int
    single_class_folds: tuple[int, ...]  # validation folds holding one class

    @property
    def chosen(self):
        return self.cells[self.chosen_index]


def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold id per row. Each class is shuffled then dealt round-robin, the
    deal position carrying over between classes to balance fold sizes."""
    n = len(labels)
    if n < folds:
        raise ValueError(f"need at least {folds} rows for {folds}-fold splits, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    fold_of = np.empty(n, dtype=np.int64)
    pos = 0
    for value in (1, -1):
        idx = np.flatnonzero(labels == value)
        rng.shuffle(idx)
        fold_of[idx] = (pos + np.arange(len(idx))) % folds
        pos += len(idx)
    return fold_of


def grid_search_cv(
    data: LabeledFeatureSet,
    family: str,
    grid: Sequence | None = None,
    folds: int = CV_FOLDS,
    seed: int = 0,
    n_jobs: int = 1,
):
    """Returns (GridSearchReport, model retrained on all rows)."""
    if grid is None:
        grid = default_grid(family)
    grid = tuple(grid)
    if not grid:
        raise ValueError("empty grid")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    _require_both_classes(data.labels)
    fold_of = stratified_folds(data.labels, folds, seed)

    splits = []
    single_class = []
    for f in range(folds):
        val = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        splits.append((train, val))
        if np.all(data.labels[val] == data.labels[val][0]):
            single_class.append(f)

    def score_cell_fold(job):
        ci, f = job
        train, val = splits[f]
        model = _train(family, data.subset(train), grid[ci], seed)
        pred = predict(model, data.features[val])
        return float(np.mean(pred == data.labels[val]))

    jobs = [(ci, f) for ci in range(len(grid)) for f in range(folds)]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            scores = list(pool.map(score_cell_fold, jobs))
    else:
        scores = [score_cell_fold(job) for job in jobs]

    fold_acc = np.array(scores).reshape(len(grid), folds)
    mean_acc = fold_acc.mean(axis=1)
    chosen = int(np.argmax(mean_acc))  # first maximum, so grid order breaks ties
    report = GridSearchReport(
        family=family,
        cells=grid,
        fold_accuracies=fold_acc,
        mean_accuracy=mean_acc,
        chosen_index=chosen,
        folds=folds,
        seed=seed,
        single_class_folds=tuple(single_class),
    )
    final = _train(family, data, grid[chosen], seed)
    return report, final


# --------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Metrics:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total


def confusion(predictions: np.ndarray, labels: np.ndarray) -> Metrics:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    return Metrics(
        tp=int(np.sum((predictions > 0) & (labels > 0))),
        fn=int(np.sum((predictions <= 0) & (labels > 0))),
        tn=int(np.sum((predictions <= 0) & (labels <= 0))),
        fp=int(np.sum((predictions > 0) & (labels <= 0))),
    )


def evaluate(model, data: LabeledFeatureSet) -> Metrics:
    return confusion(predict(model, data.features), data.labels)


def format_metrics(m: Metrics) -> str:
    return f"{100.0 * m.accuracy:.2f}% (tp:{m.tp} fn:{m.fn} tn:{m.tn} fp:{m.fp})"


# ------------------------------------------------------------------- model io

def save_rf(model: RandomForestModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p = model.params
    with open(path, "wb") as fh:
        fh.write(RF_MAGIC)
        fh.write(struct.pack("<I", RF_VERSION))
        fh.write(struct.pack("<IiIIq", p.n_trees,
                             -1 if p.max_depth is None else p.max_depth,
                             p.min_leaf, model.n_features, model.seed))
        for tree, idx in zip(model.trees, model.bootstrap):
            fh.write(struct.pack("<I", len(tree.feature)))
            fh.write(np.ascontiguousarray(tree.feature, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(tree.threshold, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(tree.left, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(tree.right, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(tree.votes, dtype="<u4").tobytes())
            fh.write(struct.pack("<I", len(idx)))
            fh.write(np.ascontiguousarray(idx, dtype="<i8").tobytes())


def load_rf(path) -> RandomForestModel:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(RF_MAGIC)) != RF_MAGIC:
            raise ValueError(f"{path}: not a random forest model file (bad magic)")
        (version,) = struct.unpack("<I", read_exact(fh, 4, path))
        if version != RF_VERSION:
            raise ValueError(f"{path}: unsupported model format version {version}")
        n_trees, depth, min_leaf, n_features, seed = struct.unpack(
            "<IiIIq", read_exact(fh, 24, path))
        trees = []
        bootstrap = []
        for _ in range(n_trees):
            (m,) = struct.unpack("<I", read_exact(fh, 4, path))
            feature = np.frombuffer(read_exact(fh, 4 * m, path), dtype="<i4")
            threshold = np.frombuffer(read_exact(fh, 8 * m, path), dtype="<f8")
            left = np.frombuffer(read_exact(fh, 4 * m, path), dtype="<i4")
            right = np.frombuffer(read_exact(fh, 4 * m, path), dtype="<i4")
            votes = np.frombuffer(read_exact(fh, 8 * m, path), dtype="<u4").reshape(m, 2)
            trees.append(DecisionTree(feature=feature.copy(), threshold=threshold.copy(),
                                      left=left.copy(), right=right.copy(), votes=votes.copy()))
            (nb,) = struct.unpack("<I", read_exact(fh, 4, path))
            bootstrap.append(np.frombuffer(read_exact(fh, 8 * nb, path), dtype="<i8").copy())
    params = RfParams(n_trees=n_trees, max_depth=None if depth < 0 else depth, min_leaf=min_leaf)
    return RandomForestModel(params=params, trees=tuple(trees), bootstrap=tuple(bootstrap),
                             n_features=n_features, seed=seed)


def save_svm(model: SvmModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(SVM_MAGIC)
        fh.write(struct.pack("<I", SVM_VERSION))
        fh.write(struct.pack("<B", 1 if model.kernel == "rbf" else 0))
        fh.write(struct.pack("<dddq", model.gamma, model.c, model.bias, model.seed))
        fh.write(struct.pack("<d", model.kkt_violation))
        n_sv, d = model.support_vectors.shape
        fh.write(struct.pack("<II", n_sv, d))
        fh.write(np.ascontiguousarray(model.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.scale, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.support_indices, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(model.dual_coef, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.support_vectors, dtype="<f8").tobytes())


def load_svm(path) -> SvmModel:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(SVM_MAGIC)) != SVM_MAGIC:
            raise ValueError(f"{path}: not an svm model file (bad magic)")
        (version,) = struct.unpack("<I", read_exact(fh, 4, path))
        if version != SVM_VERSION:
            raise ValueError(f"{path}: unsupported model format version {version}")
        (kernel_flag,) = struct.unpack("<B", read_exact(fh, 1, path))
        gamma, c, bias, seed = struct.unpack("<dddq", read_exact(fh, 32, path))
        (kkt,) = struct.unpack("<d", read_exact(fh, 8, path))
        n_sv, d = struct.unpack("<II", read_exact(fh, 8, path))
        mean = np.frombuffer(read_exact(fh, 8 * d, path), dtype="<f8").copy()
        scale = np.frombuffer(read_exact(fh, 8 * d, path), dtype="<f8").copy()
        support = np.frombuffer(read_exact(fh, 8 * n_sv, path), dtype="<i8").copy()
        dual = np.frombuffer(read_exact(fh, 8 * n_sv, path), dtype="<f8").copy()
        svs = np.frombuffer(read_exact(fh, 8 * n_sv * d, path), dtype="<f8").reshape(n_sv, d).copy()
    return SvmModel(kernel="rbf" if kernel_flag else "linear", gamma=gamma, c=c,
                    support_vectors=svs, dual_coef=dual, bias=bias,
                    support_indices=support, mean=mean, scale=scale,
                    kkt_violation=kkt, seed=seed)


def load_classifier(path):
    """Load either family by sniffing the magic bytes."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == RF_MAGIC:
        return load_rf(path)
    if magic == SVM_MAGIC:
        return load_svm(path)
    raise ValueError(f"{path}: not a classifier model file (bad magic)")
