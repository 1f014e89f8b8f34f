"""Reduce a slide's patch features to k cluster means.

Lloyd's algorithm with k-means++ restarts, WCSS-based elbow selection of k,
and canonical ordering of the resulting cluster-mean rows so that one slide
always produces the same bag matrix regardless of patch order upstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features as feature_io
from .errors import KTooLargeError, LloydMonotonicityError
from .seeds import derive_seed

DEFAULT_K = 10

# Relative WCSS increase treated as floating-point convergence noise rather
# than an algorithmic bug.
_NOISE_REL = 1e-9


@dataclass(frozen=True)
class KmeansConfig:
    max_iters: int = 300
    tol: float = 1e-6
    restarts: int = 8


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray  # (k, dim) float64
    assignments: np.ndarray  # (n,) int64
    wcss: float
    iterations: int
    seed: int
    wcss_history: list[float]


@dataclass
class BagRepresentation:
    """k cluster-mean rows standing in for one slide, in canonical row order."""

    slide_id: str
    k: int
    dim: int
    means: np.ndarray  # (k, dim) float64
    cluster_sizes: np.ndarray  # (k,) int64
    member_map: list[list[int]]  # canonical cluster -> original patch indices


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        np.einsum("ij,ij->i", x, x)[:, None]
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
        - 2.0 * (x @ centroids.T)
    )
    return np.maximum(d2, 0.0)


def _assigned_cost(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    diff = x - centroids[assign]
    return float(np.einsum("ij,ij->", diff, diff))


def _means(x: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    np.add.at(sums, assign, x)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    return sums / counts[:, None]


def _repair_empty(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    """Move the point farthest from its centroid into each empty cluster."""
    sizes = np.bincount(assign, minlength=k)
    if not (sizes == 0).any():
        return assign
    work = centroids.copy()  # the caller's accepted centroids stay untouched
    for j in np.flatnonzero(sizes == 0):
        diff = x - work[assign]
        d = np.einsum("ij,ij->i", diff, diff)
        d[sizes[assign] <= 1] = -1.0  # never drain a singleton cluster
        p = int(np.argmax(d))
        sizes[assign[p]] -= 1
        assign[p] = j
        sizes[j] = 1
        work[j] = x[p]
    return assign


def _lloyd(
    x: np.ndarray, init_centroids: np.ndarray, cfg: KmeansConfig
) -> tuple[np.ndarray, np.ndarray, float, int, list[float]]:
    k = init_centroids.shape[0]
    centroids = init_centroids.astype(np.float64).copy()
    prev_assign: np.ndarray | None = None
    prev_wcss = np.inf
    history: list[float] = []
    iterations = 0

    for it in range(1, cfg.max_iters + 1):
        assign = np.argmin(_sq_distances(x, centroids), axis=1)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            iterations = it
            break
        assign = _repair_empty(x, centroids, assign, k)
        new_centroids = _means(x, assign, k)
        wcss = _assigned_cost(x, new_centroids, assign)
        iterations = it
        if wcss > prev_wcss:
            if wcss > prev_wcss * (1.0 + _NOISE_REL):
                raise LloydMonotonicityError(
                    f"WCSS rose from {prev_wcss!r} to {wcss!r} at iteration {it}"
                )
            break  # converged to floating-point precision; keep previous state
        centroids = new_centroids
        prev_assign = assign
        history.append(wcss)
        if np.isfinite(prev_wcss) and prev_wcss - wcss <= cfg.tol * prev_wcss:
            prev_wcss = wcss
            break
        prev_wcss = wcss

    assert prev_assign is not None
    return centroids, prev_assign, history[-1], iterations, history


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = np.einsum("ij,ij->i", x - centers[0], x - centers[0])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        dj = np.einsum("ij,ij->i", x - centers[j], x - centers[j])
        d2 = np.minimum(d2, dj)
    return centers


def kmeans_fit(
    features: np.ndarray, k: int, seed: int, cfg: KmeansConfig = KmeansConfig()
) -> ClusterModel:
    """Best of ``cfg.restarts`` k-means++ initialized Lloyd runs by final WCSS.

    Distances and means are accumulated in float64 regardless of the input
    dtype; the result is deterministic in (features, k, seed, cfg).
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    n = x.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise KTooLargeError(f"k={k} exceeds n_patches={n}")
    if cfg.max_iters < 1 or cfg.restarts < 1:
        raise ValueError("max_iters and restarts must be >= 1")

    best: tuple[np.ndarray, np.ndarray, float, int, list[float]] | None = None
    for child in np.random.SeedSequence(seed).spawn(cfg.restarts):
        rng = np.random.default_rng(child)
        result = _lloyd(x, _kmeanspp(x, k, rng), cfg)
        if best is None or result[2] < best[2]:
            best = result
    assert best is not None
    centroids, assign, wcss, iters, history = best
    return ClusterModel(
        k=k,
        centroids=centroids,
        assignments=assign.astype(np.int64),
        wcss=wcss,
        iterations=iters,
        seed=seed,
        wcss_history=history,
    )


def _farthest_point(x: np.ndarray, model: ClusterModel) -> np.ndarray:
    diff = x - model.centroids[model.assignments]
    return x[int(np.argmax(np.einsum("ij,ij->i", diff, diff)))]


def wcss_curve(
    features: np.ndarray,
    k_min: int = 2,
    k_max: int = 30,
    seed: int = 0,
    cfg: KmeansConfig = KmeansConfig(),
) -> list[tuple[int, float]]:
    """(k, wcss) for k in [k_min, k_max], guaranteed non-increasing in k.

    Each k runs a cold fit seeded from the shared base seed plus a warm start
    built from the previous k's solution and its farthest point; the better
    of the two is kept, which bounds wcss(k) by wcss(k-1).
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    n = x.shape[0]
    if k_min < 1 or k_min > k_max:
        raise ValueError(f"need 1 <= k_min <= k_max, got {k_min}..{k_max}")
    if k_max > n:
        raise KTooLargeError(f"k_max={k_max} exceeds n_patches={n}")

    curve: list[tuple[int, float]] = []
    prev: ClusterModel | None = None
    for k in range(k_min, k_max + 1):
        model = kmeans_fit(x, k, derive_seed(seed, k), cfg)
        if prev is not None:
            warm_init = np.vstack([prev.centroids, _farthest_point(x, prev)])
            centroids, assign, wcss, iters, history = _lloyd(x, warm_init, cfg)
            if wcss < model.wcss:
                model = ClusterModel(
                    k=k,
                    centroids=centroids,
                    assignments=assign.astype(np.int64),
                    wcss=wcss,
                    iterations=iters,
                    seed=seed,
                    wcss_history=history,
                )
        curve.append((k, model.wcss))
        prev = model
    return curve


def elbow_select(curve: list[tuple[int, float]]) -> int:
    """k at the largest discrete second difference of the WCSS curve.

    Endpoints cannot be selected; ties break toward smaller k.
    """
    if len(curve) < 3:
        raise ValueError(f"elbow selection needs >= 3 curve points, got {len(curve)}")
    ks = [k for k, _ in curve]
    ws = [w for _, w in curve]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("curve must be sorted by strictly increasing k")
    second = [ws[i - 1] - 2.0 * ws[i] + ws[i + 1] for i in range(1, len(ws) - 1)]
    return ks[1 + int(np.argmax(second))]


def build_bag(model: ClusterModel, features: np.ndarray, slide_id: str) -> BagRepresentation:
    """Canonically ordered cluster-mean matrix plus membership bookkeeping.

    Rows are sorted by descending cluster size, ties broken by lexicographic
    centroid comparison, so shuffling patches upstream cannot reorder the bag.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.shape[0] != model.assignments.shape[0]:
        raise ValueError("model was not fit on these features (row count differs)")
    sizes = np.bincount(model.assignments, minlength=model.k)
    order = sorted(
        range(model.k), key=lambda j: (-int(sizes[j]), tuple(model.centroids[j]))
    )
    means = model.centroids[order].copy()
    member_map = [np.flatnonzero(model.assignments == j).tolist() for j in order]
    return BagRepresentation(
        slide_id=slide_id,
        k=model.k,
        dim=x.shape[1],
        means=means,
        cluster_sizes=sizes[order].astype(np.int64),
        member_map=member_map,
    )


def bag_sidecar_path(fvec_path: Path | str) -> Path:
    p = Path(fvec_path)
    name = p.name[: -len(".fvec")] if p.name.endswith(".fvec") else p.name
    return p.with_name(name + ".json")


def write_bag(
    bag: BagRepresentation,
    path: Path | str,
    *,
    wcss: float,
    seed: int,
    patch_keys: list[tuple[int, int]] | None = None,
) -> None:
    """FVEC1 payload of the k x dim means plus a JSON sidecar."""
    path = Path(path)
    feature_io.write_fvec(bag.means.astype(np.float32), path)
    sidecar = {
        "slide_id": bag.slide_id,
        "k": bag.k,
        "dim": bag.dim,
        "wcss": wcss,
        "seed": seed,
        "cluster_sizes": [int(s) for s in bag.cluster_sizes],
        "member_map": bag.member_map,
        "patch_keys": [list(pk) for pk in patch_keys] if patch_keys is not None else None,
    }
    payload = json.dumps(sidecar, sort_keys=True, indent=2) + "\n"
    feature_io._atomic_write_bytes(bag_sidecar_path(path), payload.encode("utf-8"))


def read_bag(path: Path | str) -> tuple[BagRepresentation, dict]:
    path = Path(path)
    means = feature_io.read_fvec(path).astype(np.float64)
    sidecar = json.loads(bag_sidecar_path(path).read_text(encoding="utf-8"))
    bag = BagRepresentation(
        slide_id=str(sidecar["slide_id"]),
        k=int(sidecar["k"]),
        dim=int(sidecar["dim"]),
        means=means,
        cluster_sizes=np.asarray(sidecar["cluster_sizes"], dtype=np.int64),
        member_map=[list(map(int, m)) for m in sidecar["member_map"]],
    )
    if means.shape != (bag.k, bag.dim):
        raise ValueError(f"{path}: bag payload shape {means.shape} != sidecar ({bag.k}, {bag.dim})")
    return bag, sidecar
