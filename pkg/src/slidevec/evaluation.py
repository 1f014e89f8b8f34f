"""Metrics, deterministic cohort splitting, the clustering/classifier ablation
grid, and synthetic planted-signal cohorts for end-to-end verification.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import augment as aug
from . import clustering
from . import features as feature_io
from . import mil
from .errors import DataQualityError
from .seeds import derive_seed, rng_for, seed_sequence

log = logging.getLogger(__name__)

RESULTS_HEADER = "feature_source,clustering,classifier,accuracy,kappa,precision,recall"

DEFAULT_MAX_INSTANCES = 512


@dataclass
class MetricsResult:
    accuracy: float
    precision: float
    recall: float
    kappa: float
    kappa_undefined: bool = False


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """C x C counts; rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)):
        cm[t, p] += 1
    return cm


def metrics(cm: np.ndarray) -> MetricsResult:
    """Accuracy, precision, recall and Cohen's kappa from a confusion matrix.

    Binary matrices report precision/recall of class 1; larger matrices use
    macro averaging with zero-division treated as 0. Kappa falls back to 0
    (flagged) when chance agreement is exactly 1.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    total = int(cm.sum())
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    c = cm.shape[0]
    accuracy = float(np.trace(cm)) / total

    def _safe(num: float, den: float) -> float:
        return num / den if den > 0 else 0.0

    row = cm.sum(axis=1).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    if c == 2:
        precision = _safe(float(cm[1, 1]), float(col[1]))
        recall = _safe(float(cm[1, 1]), float(row[1]))
    else:
        precision = float(np.mean([_safe(float(cm[i, i]), float(col[i])) for i in range(c)]))
        recall = float(np.mean([_safe(float(cm[i, i]), float(row[i])) for i in range(c)]))

    p_o = accuracy
    p_e = float((row * col).sum()) / (total * total)
    if p_e == 1.0:
        return MetricsResult(accuracy, precision, recall, 0.0, kappa_undefined=True)
    kappa = (p_o - p_e) / (1.0 - p_e)
    return MetricsResult(accuracy, precision, recall, kappa)


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"ratios must be three non-negative numbers, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {self.ratios}")


@dataclass
class CohortSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def bucket_of(self, slide_id: str) -> str:
        for name in ("train", "val", "test"):
            if slide_id in getattr(self, name):
                return name
        raise KeyError(slide_id)


def split_cohort(labels: dict[str, int], spec: SplitSpec = SplitSpec()) -> CohortSplit:
    """Label-stratified, seed-deterministic train/val/test split.

    Per class, floor shares go to each bucket; leftover slides fill whichever
    bucket is furthest below its cohort-level target, so totals land within
    one slide of the exact ratios and per-class proportions within one slide
    of the stratified ideal.
    """
    if not labels:
        raise DataQualityError("cannot split an empty cohort")
    by_class: dict[int, list[str]] = {}
    for sid, label in labels.items():
        by_class.setdefault(label, []).append(sid)
    for label, sids in sorted(by_class.items()):
        if len(sids) < 2:
            raise DataQualityError(f"class {label} has {len(sids)} slide(s); need >= 2 to split")

    n_total = len(labels)
    targets = [n_total * r for r in spec.ratios]
    allocated = [0.0, 0.0, 0.0]
    buckets: tuple[list[str], list[str], list[str]] = ([], [], [])
    leftovers: list[str] = []

    rng = np.random.default_rng(seed_sequence(spec.seed, "split"))
    for label in sorted(by_class):
        sids = sorted(by_class[label])
        rng.shuffle(sids)
        n_c = len(sids)
        base = [math.floor(n_c * r + 1e-9) for r in spec.ratios]
        cursor = 0
        for b in range(3):
            buckets[b].extend(sids[cursor : cursor + base[b]])
            allocated[b] += base[b]
            cursor += base[b]
        leftovers.extend(sids[cursor:])

    # leftovers land after every class's base share so the global deficits
    # reflect the whole cohort, keeping totals within one slide of the ratios
    for sid in leftovers:
        deficits = [targets[b] - allocated[b] for b in range(3)]
        b = int(np.argmax(deficits))  # ties resolve train > val > test
        buckets[b].append(sid)
        allocated[b] += 1

    return CohortSplit(
        train=sorted(buckets[0]), val=sorted(buckets[1]), test=sorted(buckets[2])
    )


def write_splits(split: CohortSplit, spec: SplitSpec, path: Path | str) -> None:
    payload = {
        "train": split.train,
        "val": split.val,
        "test": split.test,
        "ratios": list(spec.ratios),
        "seed": spec.seed,
    }
    data = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    feature_io._atomic_write_bytes(Path(path), data.encode("utf-8"))


def read_splits(path: Path | str) -> CohortSplit:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return CohortSplit(train=list(d["train"]), val=list(d["val"]), test=list(d["test"]))


def generate_synthetic_cohort(
    out_dir: Path | str,
    n_slides: int = 160,
    patches_per_slide: int = 64,
    dim: int = 16,
    signal_cluster_fraction: float = 0.1,
    shift: float = 5.0,
    seed: int = 0,
    n_background_clusters: int = 9,
    noise_sigma: float = 0.25,
    center_scale: float = 4.0,
    background_coord_noise: float = 2.0,
    per_slide_backgrounds: bool = False,
) -> list[str]:
    """Write a planted-signal cohort of FVEC1 files plus labels.csv.

    Each slide draws patch features from a mixture of Gaussian clusters. One
    minority cluster sits at a fixed center with coordinate 0 at zero;
    positive slides shift it by ``shift`` along coordinate 0 (shift=0 removes
    all class signal). The first background cluster sits at that same
    unshifted center in every slide, so the unshifted location carries no
    label information: only the shifted location separates the classes.
    Remaining background centers are shared across the cohort but pick up
    fresh per-slide offsets on coordinate 0 (scale ``background_coord_noise``),
    a nuisance that survives mean pooling; ``per_slide_backgrounds=True``
    resamples their whole geometry per slide instead, leaving the signal
    locations as the only stable landmarks. Output bytes are a pure function
    of the arguments.
    """
    if n_slides < 2 or patches_per_slide < 1 or dim < 1:
        raise ValueError("need n_slides >= 2, patches_per_slide >= 1, dim >= 1")
    if not 0.0 < signal_cluster_fraction < 1.0:
        raise ValueError(f"signal_cluster_fraction must be in (0,1), got {signal_cluster_fraction}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = rng_for(seed, "synth-centers")
    bg_centers_base = rng.normal(0.0, 1.0, size=(n_background_clusters, dim)) * center_scale
    bg_centers_base[:, 0] = 0.0
    signal_center = rng.normal(0.0, 1.0, size=dim) * center_scale
    signal_center[0] = 0.0
    bg_centers_base[0] = signal_center
    direction = np.zeros(dim)
    direction[0] = 1.0

    n_signal = max(1, round(signal_cluster_fraction * patches_per_slide))
    grid_cols = max(1, math.ceil(math.sqrt(patches_per_slide)))
    width = len(str(n_slides - 1))

    labels: dict[str, int] = {}
    slide_ids = []
    for i in range(n_slides):
        sid = f"syn{i:0{width}d}"
        label = i % 2
        srng = rng_for(seed, "synth-slide", i)
        if per_slide_backgrounds:
            bg_centers = srng.normal(0.0, 1.0, size=(n_background_clusters, dim)) * center_scale
            bg_centers[0] = signal_center
            bg_centers[:, 0] = srng.normal(
                0.0, background_coord_noise, size=n_background_clusters
            )
        else:
            bg_centers = bg_centers_base.copy()
            bg_centers[:, 0] = srng.normal(
                0.0, background_coord_noise, size=n_background_clusters
            )
        center = signal_center + (shift * direction if label == 1 else 0.0)
        rows = [center + srng.normal(0.0, noise_sigma, size=dim) for _ in range(n_signal)]
        choices = srng.integers(0, n_background_clusters, size=patches_per_slide - n_signal)
        for c in choices:
            rows.append(bg_centers[c] + srng.normal(0.0, noise_sigma, size=dim))
        matrix = np.asarray(rows, dtype=np.float32)
        patch_keys = tuple((j // grid_cols, j % grid_cols) for j in range(patches_per_slide))
        manifest = feature_io.SlideManifest(
            slide_id=sid,
            label=label,
            encoder_name="synthetic",
            dim=dim,
            patch_keys=patch_keys,
        )
        feature_io.write_features(matrix, manifest, out_dir / f"{sid}.fvec")
        labels[sid] = label
        slide_ids.append(sid)

    feature_io.write_labels(labels, out_dir / feature_io.LABELS_FILENAME)
    return slide_ids


@dataclass
class AblationRow:
    feature_source: str
    clustering: bool
    classifier: str
    result: MetricsResult | None
    error: str | None = None

    def csv_fields(self) -> list[str]:
        head = [
            self.feature_source,
            "yes" if self.clustering else "no",
            self.classifier,
        ]
        if self.result is None:
            return head + ["", "", "", ""]
        r = self.result
        return head + [f"{v:.4f}" for v in (r.accuracy, r.kappa, r.precision, r.recall)]


def _resample_rows(matrix: np.ndarray, n_rows: int, rng: np.random.Generator) -> np.ndarray:
    """Deterministically subsample (or resample up) to exactly n_rows rows."""
    n = matrix.shape[0]
    if n == n_rows:
        return matrix
    if n > n_rows:
        idx = np.sort(rng.choice(n, size=n_rows, replace=False))
    else:
        idx = np.sort(rng.choice(n, size=n_rows, replace=True))
    return matrix[idx]


def _bags_for_config(
    slides: list[feature_io.SlideFeatures],
    use_clustering: bool,
    k: int,
    kmeans_cfg: clustering.KmeansConfig,
    max_instances: int,
    master_seed: int,
) -> dict[str, np.ndarray]:
    bags: dict[str, np.ndarray] = {}
    n_rows = min(max_instances, max(s.matrix.shape[0] for s in slides))
    for s in slides:
        if use_clustering:
            model = clustering.kmeans_fit(
                s.matrix, k, derive_seed(master_seed, "cluster", s.slide_id), kmeans_cfg
            )
            bags[s.slide_id] = clustering.build_bag(model, s.matrix, s.slide_id).means
        else:
            rng = rng_for(master_seed, "subsample", s.slide_id)
            bags[s.slide_id] = _resample_rows(s.matrix.astype(np.float64), n_rows, rng)
    return bags


def evaluate_split(
    model, bags: dict[str, np.ndarray], labels: dict[str, int], ids: list[str], n_classes: int
) -> tuple[np.ndarray, MetricsResult]:
    mats = [bags[sid] for sid in ids]
    y = np.asarray([labels[sid] for sid in ids])
    _, _, preds = mil.evaluate_bags(model, mats, mil.one_hot(y, n_classes))
    cm = confusion_matrix(y, preds, n_classes)
    return cm, metrics(cm)


def run_ablation(
    slides: list[feature_io.SlideFeatures],
    labels: dict[str, int],
    split: CohortSplit,
    *,
    k: int = clustering.DEFAULT_K,
    kmeans_cfg: clustering.KmeansConfig = clustering.KmeansConfig(),
    train_cfg: mil.TrainConfig = mil.TrainConfig(),
    augment_cfg: aug.AugmentConfig | None = None,
    max_instances: int = DEFAULT_MAX_INSTANCES,
    attention_width: int = mil.DEFAULT_ATTENTION_WIDTH,
    hidden_width: int = mil.DEFAULT_HIDDEN_WIDTH,
    master_seed: int = 0,
    grid: list[tuple[bool, str]] | None = None,
) -> list[AblationRow]:
    """Train and score every (clustering on/off) x (classifier) configuration.

    A failure in one cell is recorded on its row without aborting the rest.
    """
    if grid is None:
        grid = [(True, "amil"), (True, "mlp"), (False, "amil"), (False, "mlp")]
    grid = sorted(grid, key=lambda cell: ("no" if not cell[0] else "yes", cell[1]))

    encoder = sorted({s.manifest.encoder_name for s in slides})
    feature_source = encoder[0] if len(encoder) == 1 else "+".join(encoder)
    n_classes = max(labels.values()) + 1
    dim = slides[0].matrix.shape[1]

    rows: list[AblationRow] = []
    for use_clustering, classifier in grid:
        cell_key = f"{'yes' if use_clustering else 'no'}-{classifier}"
        try:
            bags = _bags_for_config(
                slides, use_clustering, k, kmeans_cfg, max_instances, master_seed
            )
            n_rows = next(iter(bags.values())).shape[0]
            cell_seed = derive_seed(master_seed, "ablation", cell_key)
            if classifier == "amil":
                model = mil.AmilModel.initialize(dim, n_classes, attention_width, seed=cell_seed)
            elif classifier == "mlp":
                model = mil.MlpModel.initialize(n_rows * dim, n_classes, hidden_width, seed=cell_seed)
            else:
                raise ValueError(f"unknown classifier {classifier!r}")
            cell_train_cfg = mil.TrainConfig(
                learning_rate=train_cfg.learning_rate,
                weight_decay=train_cfg.weight_decay,
                beta1=train_cfg.beta1,
                beta2=train_cfg.beta2,
                eps=train_cfg.eps,
                epochs=train_cfg.epochs,
                batch_size=train_cfg.batch_size,
                seed=derive_seed(master_seed, "ablation-train", cell_key),
            )
            result = mil.train(
                model,
                [bags[sid] for sid in split.train],
                np.asarray([labels[sid] for sid in split.train]),
                [bags[sid] for sid in split.val],
                np.asarray([labels[sid] for sid in split.val]),
                n_classes,
                cell_train_cfg,
                augment_cfg,
            )
            _, m = evaluate_split(result.model, bags, labels, split.test, n_classes)
            rows.append(AblationRow(feature_source, use_clustering, classifier, m))
        except Exception as exc:  # keep the grid running
            log.warning("ablation cell %s failed: %s", cell_key, exc)
            rows.append(
                AblationRow(feature_source, use_clustering, classifier, None, error=str(exc))
            )
    return rows


def write_results_csv(rows: list[AblationRow], path: Path | str) -> None:
    lines = [RESULTS_HEADER]
    for row in rows:
        lines.append(",".join(row.csv_fields()))
    feature_io._atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def format_results_table(rows: list[AblationRow], split_note: str) -> str:
    """Human-readable two-decimal table; the header names the split protocol."""
    out = [f"# {split_note}"]
    out.append(f"{'feature_source':<16} {'clustering':<10} {'classifier':<10} "
               f"{'accuracy':>8} {'kappa':>8} {'precision':>9} {'recall':>8}")
    for row in rows:
        if row.result is None:
            out.append(
                f"{row.feature_source:<16} {'yes' if row.clustering else 'no':<10} "
                f"{row.classifier:<10} failed: {row.error}"
            )
        else:
            r = row.result
            out.append(
                f"{row.feature_source:<16} {'yes' if row.clustering else 'no':<10} "
                f"{row.classifier:<10} {r.accuracy:>8.2f} {r.kappa:>8.2f} "
                f"{r.precision:>9.2f} {r.recall:>8.2f}"
            )
    return "\n".join(out) + "\n"
