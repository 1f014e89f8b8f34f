"""Training-time bag augmentation: global scaling, Gaussian jitter, mixup.

All three operate on the k x dim bag matrix produced by clustering. They run
only while training; in evaluation mode bags pass through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .clustering import BagRepresentation
from .seeds import seed_sequence


@dataclass(frozen=True)
class AugmentConfig:
    scale_min: float = 0.9
    scale_max: float = 1.0
    jitter_level: float = 0.01
    mixup_alpha: float = 0.2
    enabled: bool = True
    use_scale: bool = True
    use_jitter: bool = True
    use_mixup: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.scale_min <= self.scale_max:
            raise ValueError(f"need 0 < scale_min <= scale_max, got {self.scale_min}..{self.scale_max}")
        if self.jitter_level < 0.0:
            raise ValueError(f"jitter_level must be >= 0, got {self.jitter_level}")
        if self.mixup_alpha <= 0.0:
            raise ValueError(f"mixup_alpha must be > 0, got {self.mixup_alpha}")


def scale_matrix(matrix: np.ndarray, rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    """One shared factor s ~ Uniform[lo, hi] multiplies every element."""
    s = float(rng.uniform(lo, hi))
    return matrix * s


def jitter_matrix(matrix: np.ndarray, rng: np.random.Generator, level: float) -> np.ndarray:
    """Adds i.i.d. zero-mean Gaussian noise with standard deviation ``level``."""
    if level == 0.0:
        return matrix.copy()
    return matrix + rng.normal(0.0, level, size=matrix.shape)


def mix_matrices(a: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"mixup shape mismatch: {a.shape} vs {b.shape}")
    return lam * a + (1.0 - lam) * b


def scale_bag(bag: BagRepresentation, cfg: AugmentConfig, rng: np.random.Generator) -> BagRepresentation:
    return replace(bag, means=scale_matrix(bag.means, rng, cfg.scale_min, cfg.scale_max))


def jitter_bag(bag: BagRepresentation, cfg: AugmentConfig, rng: np.random.Generator) -> BagRepresentation:
    return replace(bag, means=jitter_matrix(bag.means, rng, cfg.jitter_level))


def mixup_bags(
    bag_a: BagRepresentation,
    label_a: np.ndarray,
    bag_b: BagRepresentation,
    label_b: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    lam: float | None = None,
) -> tuple[BagRepresentation, np.ndarray]:
    """Convex combination of two canonically aligned bags and their one-hot labels.

    lambda ~ Beta(alpha, alpha) unless given. Bookkeeping fields (sizes,
    member map) are inherited from the first operand; a mixed bag is a
    training-only artifact and never written to disk.
    """
    label_a = np.asarray(label_a, dtype=np.float64)
    label_b = np.asarray(label_b, dtype=np.float64)
    if label_a.shape != label_b.shape:
        raise ValueError(f"label shape mismatch: {label_a.shape} vs {label_b.shape}")
    if lam is None:
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
    mixed = mix_matrices(bag_a.means, bag_b.means, lam)
    soft = lam * label_a + (1.0 - lam) * label_b
    out = replace(bag_a, slide_id=f"{bag_a.slide_id}+{bag_b.slide_id}", means=mixed)
    return out, soft


def augment_matrix(
    matrix: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, training: bool
) -> np.ndarray:
    """Scale then jitter one bag matrix; identity outside training."""
    if not training or not cfg.enabled:
        return matrix
    out = matrix
    if cfg.use_scale:
        out = scale_matrix(out, rng, cfg.scale_min, cfg.scale_max)
    if cfg.use_jitter:
        out = jitter_matrix(out, rng, cfg.jitter_level)
    return out


def bag_rng(cfg: AugmentConfig, epoch: int, bag_index: int) -> np.random.Generator:
    """Independent per-bag stream so parallel order can never change draws."""
    return np.random.default_rng(seed_sequence(cfg.rng_seed, "augment", epoch, bag_index))
