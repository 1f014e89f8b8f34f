"""Command-line entry point driving the pipeline end to end.

Subcommands: tile | cluster | train | eval | attend | synth | validate.
Configuration comes from an optional JSON file (--config) with flags taking
precedence; SLIDEVEC_WORKDIR is the work-dir fallback. Exit codes: 0 ok,
1 usage or IO, 2 data quality, 3 numeric failure. All commands are
deterministic given the config, so re-runs reproduce artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np
from PIL import Image

from . import augment as aug
from . import clustering
from . import evaluation
from . import features as feature_io
from . import mil
from . import tiling
from .config import ExperimentConfig
from .errors import (
    DataQualityError,
    EmptyCohortError,
    EmptySlideError,
    MixedDimError,
    SlidevecError,
    UnsupportedClassifierError,
)
from .seeds import derive_seed

log = logging.getLogger("slidevec")

WORKDIR_ENV = "SLIDEVEC_WORKDIR"

ATTENTION_HEADER = "slide_id,cluster,attention,row,col,x,y"


def _map_jobs(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "slides", None):
        cfg.slides_dir = args.slides
    if getattr(args, "features", None):
        cfg.features_dir = args.features
    if getattr(args, "work", None):
        cfg.work_dir = args.work
    elif cfg.work_dir is None and os.environ.get(WORKDIR_ENV):
        cfg.work_dir = os.environ[WORKDIR_ENV]
    if getattr(args, "k", None) is not None:
        cfg.k = args.k
    if getattr(args, "elbow", False):
        cfg.k = "elbow"
    if getattr(args, "nuclei_min", None) is not None:
        cfg.filter = replace(cfg.filter, nuclei_min=args.nuclei_min)
    if getattr(args, "tissue_min", None) is not None:
        cfg.filter = replace(cfg.filter, tissue_min=args.tissue_min)
    if getattr(args, "classifier", None):
        cfg.classifier = args.classifier
    if getattr(args, "epochs", None) is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    return cfg


def _require_dir(path: str | None, what: str) -> Path:
    if not path:
        raise SlidevecError(f"no {what} given (flag or config)")
    p = Path(path)
    if not p.is_dir():
        raise SlidevecError(f"{what} does not exist: {p}")
    return p


def _work_dir(cfg: ExperimentConfig) -> Path:
    if not cfg.work_dir:
        raise SlidevecError(f"no work dir given (use --work, config, or ${WORKDIR_ENV})")
    p = Path(cfg.work_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- tile

def _tile_one(
    entry: str,
    work_dir: str,
    tissue_cfg: tiling.TissueConfig,
    nuclei_cfg: tiling.NucleiConfig,
    nuclei_min: int,
    tissue_min: float,
    dump: bool,
) -> tuple[str, int, int, str | None]:
    """Tile one slide (raster file or tile directory). Returns (id, total, kept, error)."""
    path = Path(entry)
    work = Path(work_dir)
    if path.is_dir():
        slide_id = path.name
        records = tiling.records_from_tiles(tiling.list_tile_files(path), nuclei_cfg)
        raster = None
    else:
        raster = tiling.load_raster(path)
        slide_id = raster.slide_id
        mask = tiling.detect_tissue(raster, tissue_cfg)
        records = tiling.tile_slide(raster, mask)
        for rec in records:
            if rec.tissue_fraction >= tissue_min:  # count only where tissue passes
                rec.nucleus_count = tiling.count_nuclei(
                    tiling.patch_pixels(raster, rec), nuclei_cfg
                )
    error = None
    kept: list[tiling.PatchRecord] = []
    try:
        kept = tiling.filter_patches(records, nuclei_min, tissue_min)
    except EmptySlideError as exc:
        error = str(exc)
    tiling.write_patch_manifest(records, slide_id, work / "patches" / f"{slide_id}.csv")
    if dump and raster is not None:
        for rec in kept:
            tiling.save_patch_png(
                tiling.patch_pixels(raster, rec),
                work / "patch_images" / slide_id / f"r{rec.row}_c{rec.col}.png",
            )
    return slide_id, len(records), len(kept), error


def cmd_tile(args) -> int:
    cfg = _load_config(args)
    slides_dir = _require_dir(cfg.slides_dir, "slides dir")
    work = _work_dir(cfg)
    entries = sorted(
        str(p) for p in slides_dir.iterdir()
        if p.is_dir() or p.suffix.lower() in (".png", ".ppm")
    )
    if not entries:
        raise SlidevecError(f"no slides (PNG/PPM files or tile dirs) in {slides_dir}")
    worker = partial(
        _tile_one,
        work_dir=str(work),
        tissue_cfg=cfg.tissue,
        nuclei_cfg=cfg.nuclei,
        nuclei_min=cfg.filter.nuclei_min,
        tissue_min=cfg.filter.tissue_min,
        dump=bool(getattr(args, "dump_patches", False)),
    )
    results = _map_jobs(worker, entries, cfg.jobs)
    empty = []
    for slide_id, total, kept, error in results:
        if error:
            empty.append(slide_id)
            print(f"{slide_id}: {total} patches, 0 kept - {error}", file=sys.stderr)
        else:
            print(f"{slide_id}: {total} patches, {kept} kept")
    if empty:
        print(f"{len(empty)} slide(s) produced no usable patches: {', '.join(empty)}",
              file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------- cluster

def _cluster_one(
    fvec_path: str,
    out_dir: str,
    k: int,
    master_seed: int,
    cfg: clustering.KmeansConfig,
) -> tuple[str, float, str | None]:
    matrix, manifest = feature_io.read_features(Path(fvec_path))
    sid = manifest.slide_id
    try:
        model = clustering.kmeans_fit(matrix, k, derive_seed(master_seed, "cluster", sid), cfg)
    except DataQualityError as exc:
        return sid, float("nan"), str(exc)
    bag = clustering.build_bag(model, matrix, sid)
    clustering.write_bag(
        bag,
        Path(out_dir) / f"{sid}.bag.fvec",
        wcss=model.wcss,
        seed=model.seed,
        patch_keys=list(manifest.patch_keys),
    )
    return sid, model.wcss, None


def cmd_cluster(args) -> int:
    cfg = _load_config(args)
    features_dir = _require_dir(cfg.features_dir, "features dir")
    work = _work_dir(cfg)
    slides, _ = feature_io.load_cohort(features_dir, require_labels=False)
    dims = sorted({s.matrix.shape[1] for s in slides})
    if len(dims) > 1:
        raise MixedDimError(f"cohort mixes feature dims {dims}")

    k = cfg.k
    if k == "elbow":
        pooled = np.concatenate([s.matrix for s in slides], axis=0)
        if pooled.shape[0] > cfg.elbow_sample:
            rng = np.random.default_rng(derive_seed(cfg.seed, "elbow-sample"))
            idx = np.sort(rng.choice(pooled.shape[0], size=cfg.elbow_sample, replace=False))
            pooled = pooled[idx]
        k_max = min(cfg.elbow_k_max, pooled.shape[0])
        curve = clustering.wcss_curve(
            pooled, cfg.elbow_k_min, k_max, seed=derive_seed(cfg.seed, "elbow"), cfg=cfg.kmeans
        )
        k = clustering.elbow_select(curve)
        lines = ["k,wcss"] + [f"{kk},{w:.10g}" for kk, w in curve]
        feature_io._atomic_write_bytes(
            work / "wcss_curve.csv", ("\n".join(lines) + "\n").encode("utf-8")
        )
        report = {"k_star": k, "k_min": cfg.elbow_k_min, "k_max": k_max,
                  "n_pooled": int(pooled.shape[0]), "curve": [[kk, w] for kk, w in curve]}
        feature_io._atomic_write_bytes(
            work / "elbow.json",
            (json.dumps(report, sort_keys=True, indent=2) + "\n").encode("utf-8"),
        )
        print(f"elbow selected k = {k} (curve over k={cfg.elbow_k_min}..{k_max})")
    elif not isinstance(k, int):
        raise SlidevecError(f"k must be an integer or 'elbow', got {k!r}")

    bags_dir = work / "bags"
    bags_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(
        str(p) for p in features_dir.glob("*.fvec") if not p.name.endswith(".bag.fvec")
    )
    worker = partial(
        _cluster_one, out_dir=str(bags_dir), k=k, master_seed=cfg.seed, cfg=cfg.kmeans
    )
    results = _map_jobs(worker, paths, cfg.jobs)
    failed = []
    for sid, wcss, error in results:
        if error:
            failed.append(sid)
            print(f"{sid}: {error}", file=sys.stderr)
        else:
            print(f"{sid}: k={k} wcss={wcss:.6g}")
    if failed:
        print(f"{len(failed)} slide(s) could not be clustered: {', '.join(failed)}",
              file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------- train / eval

def _load_bags(work: Path) -> dict[str, clustering.BagRepresentation]:
    bags_dir = work / "bags"
    if not bags_dir.is_dir():
        raise SlidevecError(f"no bags directory at {bags_dir}; run `slidevec cluster` first")
    bags = {}
    for path in sorted(bags_dir.glob("*.bag.fvec")):
        bag, _ = clustering.read_bag(path)
        bags[bag.slide_id] = bag
    if not bags:
        raise EmptyCohortError(f"no bag files in {bags_dir}")
    return bags


def _resolve_split(
    work: Path, labels: dict[str, int], cfg: ExperimentConfig
) -> evaluation.CohortSplit:
    split_path = work / "splits.json"
    if split_path.exists():
        return evaluation.read_splits(split_path)
    spec = evaluation.SplitSpec(ratios=cfg.split.ratios, seed=derive_seed(cfg.seed, "split"))
    split = evaluation.split_cohort(labels, spec)
    evaluation.write_splits(split, spec, split_path)
    return split


def _split_note(cfg: ExperimentConfig) -> str:
    r = cfg.split.ratios
    return (f"stratified split {r[0]:.2f}/{r[1]:.2f}/{r[2]:.2f} (train/val/test), "
            f"master seed {cfg.seed}; protocol chosen here, not from any source experiment")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    features_dir = _require_dir(cfg.features_dir, "features dir")
    work = _work_dir(cfg)
    labels = feature_io.cohort_labels(features_dir)
    bags = _load_bags(work)
    missing = sorted(set(labels) - set(bags))
    if missing:
        raise DataQualityError(f"slides without bags: {', '.join(missing)}")
    split = _resolve_split(work, labels, cfg)

    shapes = {bags[sid].means.shape for sid in labels}
    dims = {s[1] for s in shapes}
    if len(dims) != 1:
        raise MixedDimError(f"bags mix feature dims {sorted(dims)}")
    dim = dims.pop()
    n_classes = max(labels.values()) + 1

    classifier = cfg.classifier
    seed_init = derive_seed(cfg.seed, "init", classifier)
    if classifier == "amil":
        model = mil.AmilModel.initialize(dim, n_classes, cfg.attention_width, seed=seed_init)
    elif classifier == "mlp":
        if len(shapes) != 1:
            raise MixedDimError(f"mlp needs uniform bag shapes, got {sorted(shapes)}")
        k = next(iter(shapes))[0]
        model = mil.MlpModel.initialize(k * dim, n_classes, cfg.hidden_width, seed=seed_init)
    else:
        raise SlidevecError(f"unknown classifier {classifier!r}")

    train_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, "train", classifier))
    augment_cfg = replace(cfg.augment, rng_seed=derive_seed(cfg.seed, "augment"))
    result = mil.train(
        model,
        [bags[sid].means for sid in split.train],
        np.asarray([labels[sid] for sid in split.train]),
        [bags[sid].means for sid in split.val],
        np.asarray([labels[sid] for sid in split.val]),
        n_classes,
        train_cfg,
        augment_cfg,
    )
    meta = {
        "classifier": classifier,
        "dim": dim,
        "n_classes": n_classes,
        "master_seed": cfg.seed,
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "split_note": _split_note(cfg),
    }
    mil.save_checkpoint(work / f"checkpoint_{classifier}.ckpt", result.model, meta)
    mil.write_history(result.history, work / f"history_{classifier}.csv")
    print(f"trained {classifier}: best val accuracy {result.best_val_accuracy:.4f} "
          f"at epoch {result.best_epoch} ({len(result.history)} epochs)")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    features_dir = _require_dir(cfg.features_dir, "features dir")
    work = _work_dir(cfg)

    if getattr(args, "ablation", False):
        slides, _ = feature_io.load_cohort(features_dir)
        labels = {s.slide_id: s.label for s in slides}
        split = _resolve_split(work, labels, cfg)
        k = cfg.k if isinstance(cfg.k, int) else clustering.DEFAULT_K
        augment_cfg = replace(cfg.augment, rng_seed=derive_seed(cfg.seed, "augment"))
        rows = evaluation.run_ablation(
            slides,
            labels,
            split,
            k=k,
            kmeans_cfg=cfg.kmeans,
            train_cfg=cfg.train,
            augment_cfg=augment_cfg,
            max_instances=cfg.max_instances,
            attention_width=cfg.attention_width,
            hidden_width=cfg.hidden_width,
            master_seed=cfg.seed,
        )
        evaluation.write_results_csv(rows, work / "ablation.csv")
        table = evaluation.format_results_table(rows, _split_note(cfg))
        (work / "ablation.txt").write_text(table, encoding="utf-8")
        print(table, end="")
        return 0

    labels = feature_io.cohort_labels(features_dir)
    bags = _load_bags(work)
    split = _resolve_split(work, labels, cfg)
    classifier = cfg.classifier
    ckpt_path = work / f"checkpoint_{classifier}.ckpt"
    if not ckpt_path.exists():
        raise SlidevecError(f"no checkpoint at {ckpt_path}; run `slidevec train` first")
    model, header = mil.load_checkpoint(ckpt_path)
    n_classes = int(header["meta"].get("n_classes", max(labels.values()) + 1))
    mats = {sid: bags[sid].means for sid in labels if sid in bags}
    cm, m = evaluation.evaluate_split(model, mats, labels, split.test, n_classes)

    slides, _ = feature_io.load_cohort(features_dir, require_labels=False)
    encoders = sorted({s.manifest.encoder_name for s in slides})
    source = encoders[0] if len(encoders) == 1 else "+".join(encoders)
    row = evaluation.AblationRow(source, True, classifier, m)
    evaluation.write_results_csv([row], work / "results.csv")
    table = evaluation.format_results_table([row], _split_note(cfg))
    (work / "results.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"test confusion matrix (rows true, cols predicted):\n{cm}")
    return 0


# ---------------------------------------------------------------- attend

def cmd_attend(args) -> int:
    cfg = _load_config(args)
    work = _work_dir(cfg)
    slide_id = args.slide
    ckpt_path = Path(args.checkpoint) if args.checkpoint else work / "checkpoint_amil.ckpt"
    if not ckpt_path.exists():
        raise SlidevecError(f"checkpoint not found: {ckpt_path}")
    model, _ = mil.load_checkpoint(ckpt_path)
    if not isinstance(model, mil.AmilModel):
        raise UnsupportedClassifierError(
            "attention export needs an attention classifier checkpoint; "
            "an MLP produces no attention weights"
        )
    bag_path = work / "bags" / f"{slide_id}.bag.fvec"
    if not bag_path.exists():
        raise SlidevecError(f"bag not found: {bag_path}")
    bag, sidecar = clustering.read_bag(bag_path)

    _, attention = mil.amil_forward(model, bag.means)

    patch_keys = sidecar.get("patch_keys")
    if args.manifest:
        _, records = tiling.read_patch_manifest(args.manifest)
        grid_rows = max(r.row for r in records) + 1
        grid_cols = max(r.col for r in records) + 1
        if patch_keys is None:
            patch_keys = [[r.row, r.col] for r in records if r.kept]
    else:
        if patch_keys is None:
            raise SlidevecError(
                f"bag sidecar for {slide_id} has no patch keys; pass --manifest"
            )
        grid_rows = max(r for r, _ in patch_keys) + 1
        grid_cols = max(c for _, c in patch_keys) + 1

    cluster_of: dict[int, int] = {}
    for cluster_idx, members in enumerate(bag.member_map):
        for patch_idx in members:
            cluster_of[patch_idx] = cluster_idx

    out_dir = work / "attention"
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [ATTENTION_HEADER]
    heat = np.zeros((grid_rows, grid_cols), dtype=np.uint8)
    amax = float(attention.max())
    for patch_idx in sorted(cluster_of):
        cluster_idx = cluster_of[patch_idx]
        weight = float(attention[cluster_idx])
        row, col = patch_keys[patch_idx]
        x, y = col * tiling.PATCH_SIZE, row * tiling.PATCH_SIZE
        lines.append(f"{slide_id},{cluster_idx},{weight:.6f},{row},{col},{x},{y}")
        heat[row, col] = int(round(255.0 * weight / amax))
    csv_path = out_dir / f"{slide_id}.attention.csv"
    feature_io._atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode("utf-8"))
    png_path = out_dir / f"{slide_id}.attention.png"
    Image.fromarray(heat, mode="L").save(png_path, format="PNG")
    print(f"wrote {csv_path} and {png_path}")
    return 0


# ---------------------------------------------------------------- synth / validate

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    ids = evaluation.generate_synthetic_cohort(
        out,
        n_slides=args.n_slides,
        patches_per_slide=args.patches,
        dim=args.dim,
        signal_cluster_fraction=args.fraction,
        shift=args.shift,
        seed=cfg.seed,
    )
    print(f"wrote {len(ids)} synthetic slides to {out}")
    return 0


def cmd_validate(args) -> int:
    cfg = _load_config(args)
    features_dir = _require_dir(cfg.features_dir, "features dir")
    report = feature_io.validate_cohort(features_dir)
    print(f"slides: {report.n_slides}")
    print(f"dim: {report.dim}")
    print(f"encoders: {', '.join(report.encoder_names)}")
    for label, count in report.per_class.items():
        print(f"class {label}: {count} slides")
    for note in report.warnings:
        print(f"warning: {note}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON; flags override it")
    p.add_argument("--work", help=f"work directory (fallback ${WORKDIR_ENV})")
    p.add_argument("--seed", type=int, help="master seed deriving all stage seeds")
    p.add_argument("--jobs", type=int, help="parallel slides (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slidevec",
        description="Tile slides, cluster patch features into bags, train and "
                    "inspect attention-pooled slide classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="tile slides into filtered patch manifests")
    _add_common(p)
    p.add_argument("--slides", help="directory of PNG/PPM slides or tile subdirs")
    p.add_argument("--nuclei-min", type=int, help="minimum nucleus count per patch")
    p.add_argument("--tissue-min", type=float, help="minimum tissue fraction per patch")
    p.add_argument("--dump-patches", action="store_true", help="write kept patch PNGs")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("cluster", help="build per-slide cluster-mean bags")
    _add_common(p)
    p.add_argument("--features", help="directory of .fvec feature files")
    p.add_argument("--k", type=int, help="cluster count per slide")
    p.add_argument("--elbow", action="store_true",
                   help="pick k from the pooled WCSS curve instead")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="train a classifier on the bags")
    _add_common(p)
    p.add_argument("--features", help="feature dir (for labels.csv)")
    p.add_argument("--classifier", choices=("amil", "mlp"))
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score the trained classifier on the test split")
    _add_common(p)
    p.add_argument("--features", help="feature dir")
    p.add_argument("--classifier", choices=("amil", "mlp"))
    p.add_argument("--ablation", action="store_true",
                   help="run the clustering x classifier grid instead")
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attend", help="export per-patch attention for one slide")
    _add_common(p)
    p.add_argument("--slide", required=True, help="slide id (bag must exist)")
    p.add_argument("--checkpoint", help="checkpoint path (default work checkpoint)")
    p.add_argument("--manifest", help="patch manifest CSV for full-grid heatmaps")
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("synth", help="generate a planted-signal synthetic cohort")
    _add_common(p)
    p.add_argument("--out", required=True, help="output feature directory")
    p.add_argument("--n-slides", type=int, default=160)
    p.add_argument("--patches", type=int, default=64)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--shift", type=float, default=5.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check a feature directory forms a cohort")
    _add_common(p)
    p.add_argument("--features", help="feature dir")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SlidevecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
