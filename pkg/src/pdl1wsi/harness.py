"""End-to-end experiment orchestration.

Ties the slide, ROI, feature, and classifier layers into one run that starts
from manifest files and ends with a written report. Split arithmetic, seed
fan-out, artifact layout, and leakage accounting all live here so the other
modules stay ignorant of experiment concerns.

A run directory looks like:

    masks/<slide_id>_roi.png      binarized ROI per slide
    features/hist_counts.txt      raw brown histograms, all slides
    features/hist_lognorm.txt     log-normalized histograms
    features/embed_mean.txt       per-slide mean embeddings (embed models only)
    features/embed_cluster.txt    cluster distributions (clustered model only)
    embeddings/<slide_id>.bin     tile embeddings per slide
    models/...                    every trained model, one file each
    report.txt                    human-readable accuracy table
    report.json                   machine-readable sidecar

report.txt never mentions the run directory or wall-clock time, so two runs
of the same config are byte-identical.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import aggregate, cae, classifiers, hist_features, roi, slide_io

CONFIGURATIONS = ("combined", "separated")
REPRESENTATIONS = ("baseline_hist", "ml_hist", "avg_embed", "clustered_embed")
CLASSIFIER_NAMES = ("baseline", "rf", "svm")

# every representation/classifier pairing that makes sense, in report order
DEFAULT_MODELS = (
    ("baseline_hist", "baseline"),
    ("ml_hist", "rf"),
    ("ml_hist", "svm"),
    ("avg_embed", "rf"),
    ("avg_embed", "svm"),
    ("clustered_embed", "rf"),
    ("clustered_embed", "svm"),
)

# seed streams for the per-stage fan-out; disjoint from the streams the
# individual modules consume internally
SPLIT_STREAM = 10
CAE_STREAM = 11
CLUSTER_STREAM = 12
CLF_STREAM = 13


def stage_seed(seed: int, stream: int) -> int:
    """Derive one stage's seed from the global experiment seed."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


class ExperimentStageError(RuntimeError):
    """A module failure annotated with the stage (and slide) it occurred in."""


class LeakageError(RuntimeError):
    """A held-out slide was consumed by a training stage."""


def model_name(representation: str, classifier: str) -> str:
    return f"{representation}:{classifier}"


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment run."""

    manifests: tuple[Path, ...]
    configuration: str = "combined"
    models: tuple[tuple[str, str], ...] = DEFAULT_MODELS
    name: str = "experiment"
    use_artifact_masks: bool = True
    seed: int = 0
    split_ratio: float = 0.7
    internal_test_ratio: float = 0.15
    internal_dataset: str = "internal"
    f_roi: float = 0.85
    epochs: int = 20
    lr: float = 0.001
    batch_size: int = 64
    k: int = aggregate.DEFAULT_K
    t_op: int = int(aggregate.DEFAULT_T_OP)
    folds: int = classifiers.CV_FOLDS
    grid_file: Path | None = None

    def __post_init__(self):
        if not self.manifests:
            raise ValueError("experiment needs at least one manifest")
        if self.configuration not in CONFIGURATIONS:
            raise ValueError(
                f"configuration must be one of {CONFIGURATIONS}, got {self.configuration!r}")
        if not self.models:
            raise ValueError("experiment needs at least one model")
        seen = set()
        for pair in self.models:
            rep, clf = pair
            if rep not in REPRESENTATIONS:
                raise ValueError(f"unknown representation {rep!r}")
            if clf not in CLASSIFIER_NAMES:
                raise ValueError(f"unknown classifier {clf!r}")
            if clf == "baseline" and rep != "baseline_hist":
                raise ValueError(
                    f"the baseline classifier only pairs with baseline_hist, got {rep!r}")
            if rep == "baseline_hist" and clf != "baseline":
                raise ValueError(
                    f"baseline_hist features only pair with the baseline classifier, got {clf!r}")
            if pair in seen:
                raise ValueError(f"duplicate model {model_name(*pair)}")
            seen.add(pair)
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        if not 0.0 < self.internal_test_ratio < 1.0:
            raise ValueError(
                f"internal_test_ratio must lie in (0, 1), got {self.internal_test_ratio}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        # f_roi, k, t_op are re-validated by the modules that consume them
        roi.RoiConfig(f_roi=self.f_roi)
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0 < self.t_op <= 100:
            raise ValueError(f"t_op must lie in (0, 100], got {self.t_op}")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        """Parse an INI-style experiment file; paths resolve relative to it."""
        path = Path(path)
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ValueError(f"cannot read experiment config {path}")
        if not parser.has_section("experiment"):
            raise ValueError(f"{path}: missing [experiment] section")
        exp = parser["experiment"]
        base = path.parent

        raw = exp.get("manifests", "").split()
        if not raw:
            raise ValueError(f"{path}: [experiment] lists no manifests")
        manifests = tuple((base / tok).resolve() for tok in raw)
        for m in manifests:
            if not m.is_file():
                raise ValueError(f"{path}: manifest not found: {m}")

        models_raw = exp.get("models", "").split()
        if models_raw:
            models = []
            for tok in models_raw:
                rep, sep, clf = tok.partition(":")
                if not sep or not rep or not clf:
                    raise ValueError(
                        f"{path}: model {tok!r} is not representation:classifier")
                models.append((rep, clf))
            models = tuple(models)
        else:
            models = DEFAULT_MODELS

        grid_raw = parser.get("grid", "file", fallback="").strip()
        grid_file = (base / grid_raw).resolve() if grid_raw else None
        if grid_file is not None and not grid_file.is_file():
            raise ValueError(f"{path}: grid file not found: {grid_file}")

        try:
            return cls(
                manifests=manifests,
                configuration=exp.get("configuration", "combined"),
                models=models,
                name=exp.get("name", path.stem),
                use_artifact_masks=exp.getboolean("use_artifact_masks", True),
                seed=exp.getint("seed", 0),
                split_ratio=exp.getfloat("split_ratio", 0.7),
                internal_test_ratio=exp.getfloat("internal_test_ratio", 0.15),
                internal_dataset=exp.get("internal_dataset", "internal"),
                f_roi=parser.getfloat("roi", "f_roi", fallback=0.85),
                epochs=parser.getint("cae", "epochs", fallback=20),
                lr=parser.getfloat("cae", "lr", fallback=0.001),
                batch_size=parser.getint("cae", "batch_size", fallback=64),
                k=parser.getint("cluster", "k", fallback=aggregate.DEFAULT_K),
                t_op=parser.getint("cluster", "t_op",
                                   fallback=int(aggregate.DEFAULT_T_OP)),
                folds=parser.getint("grid", "folds", fallback=classifiers.CV_FOLDS),
                grid_file=grid_file,
            )
        except ValueError:
            raise
        except Exception as exc:  # configparser's type coercion errors
            raise ValueError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "configuration": self.configuration,
            "manifests": [str(p) for p in self.manifests],
            "models": [model_name(r, c) for r, c in self.models],
            "use_artifact_masks": self.use_artifact_masks,
            "seed": self.seed,
            "split_ratio": self.split_ratio,
            "internal_test_ratio": self.internal_test_ratio,
            "internal_dataset": self.internal_dataset,
            "f_roi": self.f_roi,
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "k": self.k,
            "t_op": self.t_op,
            "folds": self.folds,
            "grid_file": str(self.grid_file) if self.grid_file else None,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def train_quotas(sizes: Sequence[int], ratio: float) -> list[int]:
    """Per-stratum train counts by largest-remainder apportionment.

    The global quota is floor(ratio * total); each stratum starts at
    floor(ratio * size) and leftover slots go to the largest fractional
    remainders (ties broken by stratum order).
    """
    total = int(math.floor(ratio * sum(sizes)))
    base = [int(math.floor(ratio * s)) for s in sizes]
    fracs = [ratio * s - b for s, b in zip(sizes, base)]
    order = sorted(range(len(sizes)), key=lambda i: (-fracs[i], i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def stratified_split(entries: Sequence[slide_io.ManifestEntry], ratio: float,
                     seed: int) -> tuple[list, list]:
    """Seeded stratified split by (dataset_id, label) into (train, test)."""
    strata: dict[tuple[str, str], list[int]] = {}
    for i, entry in enumerate(entries):
        strata.setdefault((entry.dataset_id, entry.label), []).append(i)
    keys = sorted(strata)
    quotas = train_quotas([len(strata[k]) for k in keys], ratio)
    rng = np.random.default_rng(np.random.SeedSequence([seed, SPLIT_STREAM]))
    train_idx: set[int] = set()
    for key, quota in zip(keys, quotas):
        members = np.array(strata[key], dtype=np.int64)
        rng.shuffle(members)
        train_idx.update(int(j) for j in members[:quota])
    train = [e for i, e in enumerate(entries) if i in train_idx]
    test = [e for i, e in enumerate(entries) if i not in train_idx]
    if not train or not test:
        raise ValueError(
            f"split ratio {ratio} leaves an empty train or test set for {len(entries)} slides")
    return train, test


@dataclass(frozen=True)
class ModelRow:
    model: str
    metrics: classifiers.Metrics


@dataclass(frozen=True)
class ReportSection:
    name: str
    slide_ids: tuple[str, ...]
    rows: tuple[ModelRow, ...]


@dataclass(frozen=True)
class ExperimentReport:
    config: ExperimentConfig
    config_sha256: str
    train_ids: tuple[str, ...]
    sections: tuple[ReportSection, ...]
    chosen: dict
    cae_losses: tuple[float, ...] | None
    provenance: dict[str, tuple[str, ...]]
    timing: dict[str, float] | None


@dataclass
class _SlidePrep:
    """Everything downstream stages need from one slide, rasters dropped."""

    entry: slide_io.ManifestEntry
    tiles: np.ndarray   # (rows*cols, down, down, 3) uint8
    inside: np.ndarray  # flat bool per tile
    hist: hist_features.HistogramFeature

    @property
    def roi_tiles(self) -> np.ndarray:
        return self.tiles[self.inside]


def load_entries(config: ExperimentConfig) -> list[slide_io.ManifestEntry]:
    entries: list[slide_io.ManifestEntry] = []
    seen: set[str] = set()
    for manifest in config.manifests:
        for entry in slide_io.read_manifest(manifest):
            if entry.slide_id in seen:
                raise ValueError(
                    f"slide id {entry.slide_id!r} appears in more than one manifest")
            seen.add(entry.slide_id)
            entries.append(entry)
    return entries


def split_entries(config: ExperimentConfig, entries: Sequence[slide_io.ManifestEntry],
                  ) -> tuple[list, list[tuple[str, list]]]:
    """Build (train_entries, [(section_name, test_entries), ...])."""
    if config.configuration == "combined":
        train, test = stratified_split(entries, config.split_ratio, config.seed)
        return train, [("test", test)]
    internal = [e for e in entries if e.dataset_id == config.internal_dataset]
    external = [e for e in entries if e.dataset_id != config.internal_dataset]
    if not internal:
        raise ValueError(
            f"separated mode found no slides with dataset id {config.internal_dataset!r}")
    if not external:
        raise ValueError(
            f"separated mode needs slides outside dataset {config.internal_dataset!r}")
    train, internal_test = stratified_split(
        internal, 1.0 - config.internal_test_ratio, config.seed)
    return train, [("internal", internal_test), ("external", external)]


def _prepare_slide(entry: slide_io.ManifestEntry, roi_config: roi.RoiConfig,
                   use_masks: bool, mask_dir: Path) -> _SlidePrep:
    raster = slide_io.load_slide(entry.path, entry.slide_id)
    artifact_mask = None
    if use_masks and entry.artifact_mask_path is not None:
        artifact_mask = slide_io.load_mask(entry.artifact_mask_path)
    result = roi.identify_roi(raster, config=roi_config, artifact_mask=artifact_mask)
    roi.write_roi_mask(result, mask_dir / f"{entry.slide_id}_roi.png")
    tiles = slide_io.downsampled_tiles(raster, result.grid, roi_config.downsampled_size)
    inside = result.inside.ravel().copy()
    feat = hist_features.HistogramFeature.from_counts(
        hist_features.brown_histogram(tiles, inside))
    return _SlidePrep(entry=entry, tiles=tiles, inside=inside, hist=feat)


def _roi_stage(config: ExperimentConfig, entries: Sequence[slide_io.ManifestEntry],
               run_dir: Path, n_jobs: int, say: Callable[[str], None],
               ) -> dict[str, _SlidePrep]:
    roi_config = roi.RoiConfig(f_roi=config.f_roi)
    mask_dir = run_dir / "masks"

    def one(entry):
        try:
            return _prepare_slide(entry, roi_config, config.use_artifact_masks, mask_dir)
        except Exception as exc:
            raise ExperimentStageError(
                f"stage roi, slide {entry.slide_id}: {exc}") from exc

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            preps = list(pool.map(one, entries))
    else:
        preps = [one(e) for e in entries]
    say(f"roi: {len(preps)} slides masked")
    return {p.entry.slide_id: p for p in preps}


def _wrap_stage(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ExperimentStageError:
        raise
    except Exception as exc:
        raise ExperimentStageError(f"stage {stage}: {exc}") from exc


def run_experiment(config: ExperimentConfig, run_dir, n_jobs: int = 1,
                   deterministic: bool = False,
                   log: Callable[[str], None] | None = None) -> ExperimentReport:
    """Execute one experiment and write its artifacts under run_dir.

    deterministic mode forces single-threaded numerics and drops wall-clock
    timing from the sidecar, so both report files are byte-stable.
    """
    say = log or (lambda msg: None)
    if deterministic:
        n_jobs = 1
    run_dir = Path(run_dir)
    for sub in ("masks", "features", "models"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)

    timing: dict[str, float] = {}
    provenance: dict[str, tuple[str, ...]] = {}

    entries = _wrap_stage("manifest", load_entries, config)
    train_entries, sections_entries = _wrap_stage("split", split_entries, config, entries)
    train_ids = tuple(e.slide_id for e in train_entries)
    held_out = {e.slide_id for _, sec in sections_entries for e in sec}
    say(f"split: {len(train_ids)} train, "
        + ", ".join(f"{len(sec)} {name}" for name, sec in sections_entries))

    t = time.perf_counter()
    preps = _roi_stage(config, entries, run_dir, n_jobs, say)
    timing["roi"] = time.perf_counter() - t

    order = [e.slide_id for e in entries]
    label_of = {e.slide_id: e.label for e in entries}
    y_of = {sid: classifiers.label_to_int(label_of[sid]) for sid in order}

    hist_features.write_features(
        run_dir / "features" / "hist_counts.txt",
        [(sid, preps[sid].hist.counts) for sid in order], "counts")
    hist_features.write_features(
        run_dir / "features" / "hist_lognorm.txt",
        [(sid, preps[sid].hist.features) for sid in order], "lognorm")

    reps_used = {rep for rep, _ in config.models}
    vectors: dict[str, dict[str, np.ndarray]] = {
        "ml_hist": {sid: preps[sid].hist.features for sid in order}}
    cae_losses: tuple[float, ...] | None = None
    chosen: dict = {}

    if reps_used & {"avg_embed", "clustered_embed"}:
        emb_dir = run_dir / "embeddings"
        emb_dir.mkdir(exist_ok=True)

        t = time.perf_counter()
        train_tiles = np.concatenate([preps[sid].roi_tiles for sid in train_ids], axis=0)
        provenance["train:cae"] = tuple(sorted(train_ids))
        weights, losses = _wrap_stage(
            "cae", cae.cae_train, train_tiles, epochs=config.epochs, lr=config.lr,
            batch_size=config.batch_size, seed=stage_seed(config.seed, CAE_STREAM),
            log=say)
        cae_losses = tuple(float(v) for v in losses)
        cae.save_weights(weights, run_dir / "models" / "cae.bin")
        timing["cae"] = time.perf_counter() - t
        say(f"cae: trained on {train_tiles.shape[0]} tiles, "
            f"final loss {cae_losses[-1]:.6f}")

        t = time.perf_counter()
        embeddings: dict[str, np.ndarray] = {}
        for sid in order:
            vecs = cae.encode_all(weights, preps[sid].roi_tiles,
                                  batch_size=config.batch_size)
            embeddings[sid] = vecs
            cae.write_embeddings(emb_dir / f"{sid}.bin", sid, vecs)
        timing["embed"] = time.perf_counter() - t

        if "avg_embed" in reps_used:
            vectors["avg_embed"] = {
                sid: aggregate.average_aggregate(embeddings[sid]) for sid in order}
            aggregate.write_vectors(
                run_dir / "features" / "embed_mean.txt",
                [(sid, vectors["avg_embed"][sid]) for sid in order], "mean")

        if "clustered_embed" in reps_used:
            t = time.perf_counter()
            provenance["train:cluster"] = tuple(sorted(train_ids))
            model = _wrap_stage(
                "cluster", aggregate.fit_cluster_model,
                [embeddings[sid] for sid in train_ids], k=config.k, t_op=config.t_op,
                seed=stage_seed(config.seed, CLUSTER_STREAM))
            aggregate.save_cluster_model(model, run_dir / "models" / "clusters.bin")
            vectors["clustered_embed"] = {
                sid: aggregate.cluster_distribution(embeddings[sid], model)
                for sid in order}
            aggregate.write_vectors(
                run_dir / "features" / "embed_cluster.txt",
                [(sid, vectors["clustered_embed"][sid]) for sid in order], "cluster")
            timing["cluster"] = time.perf_counter() - t
            say(f"cluster: K={model.k}, t_op={model.t_op:g}")

    clf_seed = stage_seed(config.seed, CLF_STREAM)
    section_rows: dict[str, list[ModelRow]] = {name: [] for name, _ in sections_entries}

    t = time.perf_counter()
    for rep, clf in config.models:
        mname = model_name(rep, clf)
        if clf == "baseline":
            counts = np.stack([preps[sid].hist.counts for sid in train_ids])
            labels = np.array([label_of[sid] for sid in train_ids])
            provenance[f"train:{mname}"] = tuple(sorted(train_ids))
            thresholds = _wrap_stage(mname, hist_features.baseline_train, counts, labels)
            hist_features.write_baseline(thresholds, run_dir / "models" / "baseline.txt")
            chosen[mname] = {"t_bin": thresholds.t_bin, "t_cls": thresholds.t_cls}

            def predict_ids(sids, thresholds=thresholds):
                names = [hist_features.baseline_predict(preps[s].hist.counts, thresholds)
                         for s in sids]
                return np.array([classifiers.label_to_int(n) for n in names])
        else:
            rows = [(sid, vectors[rep][sid], label_of[sid]) for sid in train_ids]
            data = classifiers.LabeledFeatureSet.from_rows(rows)
            grid = (classifiers.parse_grid(config.grid_file, clf)
                    if config.grid_file else classifiers.default_grid(clf))
            provenance[f"train:{mname}"] = tuple(sorted(train_ids))
            search, model = _wrap_stage(
                mname, classifiers.grid_search_cv, data, clf, grid=grid,
                folds=config.folds, seed=clf_seed, n_jobs=n_jobs)
            out = run_dir / "models" / f"{rep}_{clf}.bin"
            if clf == "rf":
                classifiers.save_rf(model, out)
            else:
                classifiers.save_svm(model, out)
            chosen[mname] = {
                "params": dataclasses.asdict(search.chosen),
                "cv_accuracy": float(search.mean_accuracy[search.chosen_index]),
                "grid_index": int(search.chosen_index),
            }

            def predict_ids(sids, model=model, rep=rep):
                feats = np.stack([vectors[rep][s] for s in sids])
                return classifiers.predict(model, feats)

        for name, sec in sections_entries:
            sids = [e.slide_id for e in sec]
            preds = predict_ids(sids)
            truth = np.array([y_of[s] for s in sids])
            metrics = classifiers.confusion(preds, truth)
            section_rows[name].append(ModelRow(model=mname, metrics=metrics))
        say(f"{mname}: trained and scored")
    timing["classifiers"] = time.perf_counter() - t

    assert_no_leakage(provenance, held_out)

    sections = tuple(
        ReportSection(name=name, slide_ids=tuple(e.slide_id for e in sec),
                    rows=tuple(section_rows[name]))
        for name, sec in sections_entries)
    report = ExperimentReport(
        config=config,
        config_sha256=config.digest(),
        train_ids=train_ids,
        sections=sections,
        chosen=chosen,
        cae_losses=cae_losses,
        provenance=provenance,
        timing=None if deterministic else dict(timing),
    )
    write_run(report, run_dir)
    return report


def assert_no_leakage(provenance: dict[str, tuple[str, ...]],
                      held_out: set[str]) -> None:
    """Raise if any held-out slide id fed a training stage."""
    for stage in sorted(provenance):
        if not stage.startswith("train:"):
            continue
        leaked = sorted(set(provenance[stage]) & held_out)
        if leaked:
            raise LeakageError(
                f"stage {stage} consumed held-out slides: {', '.join(leaked)}")


def render_report(report: ExperimentReport) -> str:
    """The human-readable accuracy table, stable across re-runs."""
    cfg = report.config
    lines = [
        "pdl1wsi experiment report",
        f"name: {cfg.name}",
        f"configuration: {cfg.configuration}",
        f"seed: {cfg.seed}",
        f"config sha256: {report.config_sha256}",
        f"train slides: {len(report.train_ids)}",
        "",
    ]
    for sec in report.sections:
        lines.append(f"== test set: {sec.name} ({len(sec.slide_ids)} slides) ==")
        for row in sec.rows:
            lines.append(f"{row.model} & {classifiers.format_metrics(row.metrics)}")
        lines.append("")
    return "\n".join(lines)


def sidecar_dict(report: ExperimentReport) -> dict:
    return {
        "config": report.config.to_dict(),
        "config_sha256": report.config_sha256,
        "train_slide_ids": list(report.train_ids),
        "sections": [
            {
                "name": sec.name,
                "slide_ids": list(sec.slide_ids),
                "rows": [
                    {
                        "model": row.model,
                        "tp": row.metrics.tp,
                        "fn": row.metrics.fn,
                        "tn": row.metrics.tn,
                        "fp": row.metrics.fp,
                        "accuracy": row.metrics.accuracy,
                    }
                    for row in sec.rows
                ],
            }
            for sec in report.sections
        ],
        "chosen": report.chosen,
        "cae_loss_per_epoch": (list(report.cae_losses)
                               if report.cae_losses is not None else None),
        "provenance": {k: list(v) for k, v in sorted(report.provenance.items())},
        "timing": report.timing,
    }


def write_run(report: ExperimentReport, run_dir) -> tuple[Path, Path]:
    run_dir = Path(run_dir)
    txt = run_dir / "report.txt"
    sidecar = run_dir / "report.json"
    txt.write_text(render_report(report))
    sidecar.write_text(json.dumps(sidecar_dict(report), indent=2, sort_keys=True) + "\n")
    return txt, sidecar
