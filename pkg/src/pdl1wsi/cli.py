"""Command-line interface.

One subcommand per pipeline stage plus `experiment`, which runs everything
from a declarative config file. Every command prints what it wrote; errors
land on stderr with exit code 2.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import (aggregate, cae, classifiers, harness, hist_features, roi,
               slide_io, synthgen, util)


def _effective_jobs(requested: int | None) -> int:
    """Worker count: --jobs if given, else PDL1_THREADS, else 1.

    PDL1_THREADS also caps an explicit --jobs when both are set.
    """
    if requested is None:
        return util.worker_count(default=1)
    if requested < 1:
        raise ValueError(f"--jobs must be >= 1, got {requested}")
    return min(requested, util.worker_count(default=requested))


def _read_feature_rows(path) -> list[tuple[str, np.ndarray]]:
    """Rows from either feature file flavor (histograms or vectors)."""
    path = Path(path)
    try:
        head = path.open().readline()
    except OSError as exc:
        raise ValueError(f"cannot read features {path}: {exc}") from exc
    if hist_features.FEATURE_FILE_VERSION in head:
        return hist_features.read_features(path)[1]
    if aggregate.VECTOR_FILE_VERSION in head:
        return aggregate.read_vectors(path)[1]
    raise ValueError(f"{path}: not a recognized feature file")


def _labeled_set(rows, manifest_path) -> classifiers.LabeledFeatureSet:
    label_of = {e.slide_id: e.label for e in slide_io.read_manifest(manifest_path)}
    missing = [sid for sid, _ in rows if sid not in label_of]
    if missing:
        raise ValueError(
            f"{manifest_path}: no label for slide(s): {', '.join(sorted(missing)[:5])}")
    return classifiers.LabeledFeatureSet.from_rows(
        [(sid, vec, label_of[sid]) for sid, vec in rows])


def _roi_mask_for(roi_dir: Path, slide_id: str) -> np.ndarray:
    mask_path = roi_dir / f"{slide_id}_roi.png"
    if not mask_path.is_file():
        raise ValueError(f"no ROI mask for {slide_id}: expected {mask_path}")
    return roi.read_roi_mask(mask_path)


def _roi_tiles_for(entry: slide_io.ManifestEntry, roi_dir: Path) -> np.ndarray:
    """Downsampled ROI tiles of one manifest slide, mask read from roi_dir."""
    raster = slide_io.load_slide(entry.path, entry.slide_id)
    grid = slide_io.make_grid(raster)
    mask = _roi_mask_for(roi_dir, entry.slide_id)
    if mask.shape != (grid.rows, grid.cols):
        raise ValueError(
            f"{entry.slide_id}: ROI mask is {mask.shape}, grid is "
            f"({grid.rows}, {grid.cols})")
    tiles = slide_io.downsampled_tiles(raster, grid)
    return tiles[mask.ravel()]


def cmd_synth(args) -> int:
    template = synthgen.preset_template(args.preset, external=args.external)
    manifest = synthgen.generate_corpus(
        args.out, args.pos, args.neg, args.dataset_id, seed=args.seed,
        template=template, stain_fraction_positive=args.stain_fraction)
    print(f"wrote {args.pos + args.neg} slides, manifest {manifest}")
    return 0


def cmd_tile(args) -> int:
    raster = slide_io.load_slide(args.slide)
    grid = slide_io.make_grid(raster, tile_size=args.tile_size)
    tiles = slide_io.downsampled_tiles(raster, grid, out_size=args.down)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image
    for idx in range(tiles.shape[0]):
        r, c = divmod(idx, grid.cols)
        Image.fromarray(tiles[idx]).save(out / f"{raster.slide_id}_r{r:02d}_c{c:02d}.png")
    print(f"wrote {tiles.shape[0]} tiles ({grid.rows}x{grid.cols} grid) to {out}")
    return 0


def cmd_roi(args) -> int:
    raster = slide_io.load_slide(args.slide)
    artifact_mask = slide_io.load_mask(args.artifact_mask) if args.artifact_mask else None
    config = roi.RoiConfig(f_roi=args.f_roi)
    result = roi.identify_roi(raster, config=config, artifact_mask=artifact_mask)
    roi.write_roi_mask(result, args.out, float_sidecar=args.float_sidecar)
    total = result.grid.rows * result.grid.cols
    print(f"{raster.slide_id}: {result.n_inside}/{total} tiles in ROI, wrote {args.out}")
    return 0


def cmd_featurize_hist(args) -> int:
    roi_dir = Path(args.roi_dir)
    rows = []
    for entry in slide_io.read_manifest(args.manifest):
        raster = slide_io.load_slide(entry.path, entry.slide_id)
        grid = slide_io.make_grid(raster)
        mask = _roi_mask_for(roi_dir, entry.slide_id)
        if mask.shape != (grid.rows, grid.cols):
            raise ValueError(
                f"{entry.slide_id}: ROI mask is {mask.shape}, grid is "
                f"({grid.rows}, {grid.cols})")
        tiles = slide_io.downsampled_tiles(raster, grid)
        counts = hist_features.brown_histogram(tiles, mask.ravel())
        feat = hist_features.HistogramFeature.from_counts(counts)
        rows.append((entry.slide_id,
                     feat.counts if args.kind == "counts" else feat.features))
    hist_features.write_features(args.out, rows, args.kind)
    print(f"wrote {len(rows)} {args.kind} rows to {args.out}")
    return 0


def cmd_train_baseline(args) -> int:
    kind, rows = hist_features.read_features(args.features)
    if kind != "counts":
        raise ValueError(f"baseline training needs raw counts, got kind {kind!r}")
    label_of = {e.slide_id: e.label for e in slide_io.read_manifest(args.labels)}
    missing = [sid for sid, _ in rows if sid not in label_of]
    if missing:
        raise ValueError(
            f"{args.labels}: no label for slide(s): {', '.join(sorted(missing)[:5])}")
    counts = np.stack([vec for _, vec in rows])
    labels = np.array([label_of[sid] for sid, _ in rows])
    thresholds = hist_features.baseline_train(counts, labels)
    hist_features.write_baseline(thresholds, args.out)
    acc = hist_features.evaluate_baseline(counts, labels, thresholds)
    print(f"t_bin={thresholds.t_bin} t_cls={thresholds.t_cls:g} "
          f"training accuracy {acc:.4f}, wrote {args.out}")
    return 0


def cmd_predict_baseline(args) -> int:
    thresholds = hist_features.read_baseline(args.model)
    kind, rows = hist_features.read_features(args.features)
    if kind != "counts":
        raise ValueError(f"baseline prediction needs raw counts, got kind {kind!r}")
    predicted = {sid: hist_features.baseline_predict(vec, thresholds)
                 for sid, vec in rows}
    lines = [f"{sid}\t{predicted[sid]}" for sid, _ in rows]
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} predictions to {args.out}")
    if args.labels:
        label_of = {e.slide_id: e.label for e in slide_io.read_manifest(args.labels)}
        pred = np.array([classifiers.label_to_int(predicted[sid])
                         for sid, _ in rows if sid in label_of])
        truth = np.array([classifiers.label_to_int(label_of[sid])
                          for sid, _ in rows if sid in label_of])
        if pred.size:
            print(classifiers.format_metrics(classifiers.confusion(pred, truth)))
    return 0


def cmd_train_cae(args) -> int:
    roi_dir = Path(args.roi_dir)
    stacks = [_roi_tiles_for(entry, roi_dir)
              for entry in slide_io.read_manifest(args.manifest)]
    tiles = np.concatenate(stacks, axis=0)
    weights, losses = cae.cae_train(
        tiles, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
        seed=args.seed, log=print)
    cae.save_weights(weights, args.out)
    print(f"trained on {tiles.shape[0]} tiles, final loss {losses[-1]:.6f}, "
          f"wrote {args.out}")
    return 0


def cmd_embed(args) -> int:
    weights = cae.load_weights(args.cae)
    raster = slide_io.load_slide(args.slide)
    grid = slide_io.make_grid(raster)
    mask = roi.read_roi_mask(args.roi)
    if mask.shape != (grid.rows, grid.cols):
        raise ValueError(
            f"{raster.slide_id}: ROI mask is {mask.shape}, grid is "
            f"({grid.rows}, {grid.cols})")
    tiles = slide_io.downsampled_tiles(raster, grid)[mask.ravel()]
    if tiles.shape[0] == 0:
        raise ValueError(f"{raster.slide_id}: ROI mask selects no tiles")
    vectors = cae.encode_all(weights, tiles)
    cae.write_embeddings(args.out, raster.slide_id, vectors)
    print(f"{raster.slide_id}: embedded {vectors.shape[0]} tiles, wrote {args.out}")
    return 0


def cmd_aggregate(args) -> int:
    emb_dir = Path(args.embeddings)
    paths = sorted(emb_dir.glob("*.bin"))
    if not paths:
        raise ValueError(f"no .bin embedding files in {emb_dir}")
    groups = [cae.read_embeddings(p) for p in paths]

    if args.mode == "mean":
        rows = [(sid, aggregate.average_aggregate(vecs)) for sid, vecs in groups]
        aggregate.write_vectors(args.out, rows, "mean")
    else:
        if not args.cluster_model:
            raise ValueError("--cluster-model is required in cluster mode")
        if args.fit:
            model = aggregate.fit_cluster_model(
                [vecs for _, vecs in groups], k=args.k, t_op=args.t_op,
                seed=args.seed)
            aggregate.save_cluster_model(model, args.cluster_model)
            print(f"fitted K={model.k} t_op={model.t_op:g}, "
                  f"wrote {args.cluster_model}")
        else:
            model = aggregate.load_cluster_model(args.cluster_model)
        rows = [(sid, aggregate.cluster_distribution(vecs, model))
                for sid, vecs in groups]
        aggregate.write_vectors(args.out, rows, "cluster")
    print(f"wrote {len(rows)} {args.mode} rows to {args.out}")
    return 0


def cmd_train_clf(args) -> int:
    data = _labeled_set(_read_feature_rows(args.features), args.labels)
    grid = (classifiers.parse_grid(args.grid, args.family)
            if args.grid else classifiers.default_grid(args.family))
    report, model = classifiers.grid_search_cv(
        data, args.family, grid=grid, folds=args.folds, seed=args.seed,
        n_jobs=_effective_jobs(args.jobs))
    if args.family == "rf":
        classifiers.save_rf(model, args.out)
    else:
        classifiers.save_svm(model, args.out)
    print(f"chose {report.chosen} "
          f"(cv accuracy {report.mean_accuracy[report.chosen_index]:.4f}), "
          f"wrote {args.out}")
    if report.single_class_folds:
        print(f"warning: validation folds {list(report.single_class_folds)} "
              "held a single class", file=sys.stderr)
    return 0


def cmd_classify(args) -> int:
    model = classifiers.load_classifier(args.model)
    rows = _read_feature_rows(args.features)
    features = np.stack([vec for _, vec in rows])
    predictions = classifiers.predict(model, features)
    lines = [f"{sid}\t{classifiers.label_to_str(int(p))}"
             for (sid, _), p in zip(rows, predictions)]
    if args.labels:
        label_of = {e.slide_id: e.label for e in slide_io.read_manifest(args.labels)}
        missing = [sid for sid, _ in rows if sid not in label_of]
        if missing:
            raise ValueError(
                f"{args.labels}: no label for slide(s): "
                f"{', '.join(sorted(missing)[:5])}")
        truth = np.array([classifiers.label_to_int(label_of[sid]) for sid, _ in rows])
        metrics = classifiers.confusion(predictions, truth)
        lines.append(f"# {classifiers.format_metrics(metrics)}")
        print(classifiers.format_metrics(metrics))
    Path(args.report).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(rows)} predictions to {args.report}")
    return 0


def cmd_experiment(args) -> int:
    config = harness.ExperimentConfig.from_file(args.config)
    jobs = 1 if args.deterministic else _effective_jobs(args.jobs)
    report = harness.run_experiment(
        config, args.out, n_jobs=jobs, deterministic=args.deterministic,
        log=lambda msg: print(msg, file=sys.stderr))
    print(harness.render_report(report), end="")
    print(f"run directory: {args.out}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    target = run_dir / ("report.json" if args.json else "report.txt")
    if not target.is_file():
        raise ValueError(f"no report at {target}; run `experiment` first")
    print(target.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdl1wsi",
        description="Weakly-supervised PD-L1 classification of whole-slide images")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic slide corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--pos", type=int, required=True, help="number of positive slides")
    p.add_argument("--neg", type=int, required=True, help="number of negative slides")
    p.add_argument("--dataset-id", required=True, help="dataset id for the manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", default="paperlike",
                   choices=sorted(synthgen.PRESETS))
    p.add_argument("--external", action="store_true",
                   help="use the shifted external staining palette")
    p.add_argument("--stain-fraction", type=float, default=0.05,
                   help="stained tissue fraction for positive slides")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="write a slide's downsampled tiles as images")
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tile-size", type=int, default=slide_io.DEFAULT_TILE_SIZE)
    p.add_argument("--down", type=int, default=slide_io.DOWNSAMPLED_SIZE,
                   help="downsampled tile edge")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("roi", help="compute a slide's tissue mask")
    p.add_argument("--slide", required=True)
    p.add_argument("--artifact-mask", default=None,
                   help="hand-annotation mask image to exclude")
    p.add_argument("--f-roi", type=float, default=0.85,
                   help="near-white fraction above which a tile is background")
    p.add_argument("--out", required=True, help="output mask image")
    p.add_argument("--float-sidecar", default=None,
                   help="also write per-tile scores to this path")
    p.set_defaults(func=cmd_roi)

    p = sub.add_parser("featurize-hist", help="brown histograms for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--roi-dir", required=True,
                   help="directory holding <slide_id>_roi.png masks")
    p.add_argument("--kind", choices=("counts", "lognorm"), default="counts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize_hist)

    p = sub.add_parser("train-baseline", help="fit the histogram-ratio thresholds")
    p.add_argument("--features", required=True, help="counts feature file")
    p.add_argument("--labels", required=True, help="manifest supplying labels")
    p.add_argument("--out", required=True, help="threshold file")
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("predict-baseline", help="apply saved histogram thresholds")
    p.add_argument("--model", required=True, help="threshold file")
    p.add_argument("--features", required=True, help="counts feature file")
    p.add_argument("--labels", default=None, help="optional manifest for accuracy")
    p.add_argument("--out", required=True, help="predictions file")
    p.set_defaults(func=cmd_predict_baseline)

    p = sub.add_parser("train-cae", help="train the tile autoencoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--roi-dir", required=True,
                   help="directory holding <slide_id>_roi.png masks")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="weights file")
    p.set_defaults(func=cmd_train_cae)

    p = sub.add_parser("embed", help="encode one slide's ROI tiles")
    p.add_argument("--cae", required=True, help="weights file")
    p.add_argument("--slide", required=True)
    p.add_argument("--roi", required=True, help="ROI mask image")
    p.add_argument("--out", required=True, help="embeddings file")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("aggregate", help="slide vectors from tile embeddings")
    p.add_argument("--mode", choices=("mean", "cluster"), required=True)
    p.add_argument("--embeddings", required=True,
                   help="directory of per-slide .bin embedding files")
    p.add_argument("--cluster-model", default=None,
                   help="cluster model path (cluster mode)")
    p.add_argument("--fit", action="store_true",
                   help="fit the cluster model on these embeddings first")
    p.add_argument("--k", type=int, default=aggregate.DEFAULT_K)
    p.add_argument("--t-op", type=float, default=aggregate.DEFAULT_T_OP)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="feature file")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("train-clf", help="grid-searched forest or margin classifier")
    p.add_argument("--features", required=True, help="histogram or vector feature file")
    p.add_argument("--labels", required=True, help="manifest supplying labels")
    p.add_argument("--family", choices=("rf", "svm"), required=True)
    p.add_argument("--grid", default=None, help="grid config file (default built-in)")
    p.add_argument("--folds", type=int, default=classifiers.CV_FOLDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", required=True, help="model file")
    p.set_defaults(func=cmd_train_clf)

    p = sub.add_parser("classify", help="predict labels with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", default=None, help="optional manifest for accuracy")
    p.add_argument("--report", required=True, help="predictions output file")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("experiment", help="run a full experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, timing-free, byte-stable outputs")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="print a finished run's report")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--json", action="store_true", help="print the sidecar instead")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
