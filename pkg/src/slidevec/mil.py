"""Attention-pooled MIL classifier and MLP baseline, trained with AdamW.

The attention classifier scores each bag row h_i with w . tanh(V h_i),
softmax-normalizes the scores into weights a, pools z = sum_i a_i h_i and
classifies z with an affine head. Pooling is a symmetric function of the
rows, so logits are invariant to any row permutation while the attention
weights permute along with the rows.

Gradients are derived by hand (reverse mode) and checked against central
finite differences in the test suite. Training math runs in float64;
checkpoints store float32.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from . import features as feature_io
from .errors import TrainingDivergedError, UnsupportedClassifierError
from .seeds import seed_sequence

Params = dict[str, np.ndarray]

DEFAULT_ATTENTION_WIDTH = 128
DEFAULT_HIDDEN_WIDTH = 256

CHECKPOINT_FORMAT = "slidevec-checkpoint-v1"
HISTORY_HEADER = "epoch,train_loss,val_accuracy,val_loss"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class AmilModel:
    """Parameters of the attention classifier (all float64)."""

    attn_proj: np.ndarray  # (L, dim)
    attn_score: np.ndarray  # (L,)
    clf_weight: np.ndarray  # (C, dim)
    clf_bias: np.ndarray  # (C,)

    @property
    def dim(self) -> int:
        return self.attn_proj.shape[1]

    @property
    def attention_width(self) -> int:
        return self.attn_proj.shape[0]

    @property
    def n_classes(self) -> int:
        return self.clf_weight.shape[0]

    @classmethod
    def initialize(
        cls,
        dim: int,
        n_classes: int,
        attention_width: int = DEFAULT_ATTENTION_WIDTH,
        seed: int = 0,
    ) -> "AmilModel":
        if attention_width < 1 or n_classes < 2:
            raise ValueError("need attention_width >= 1 and n_classes >= 2")
        rng = np.random.default_rng(seed_sequence(seed, "amil-init"))
        return cls(
            attn_proj=_uniform(rng, (attention_width, dim), dim),
            attn_score=_uniform(rng, (attention_width,), attention_width),
            clf_weight=_uniform(rng, (n_classes, dim), dim),
            clf_bias=_uniform(rng, (n_classes,), dim),
        )

    def params(self) -> Params:
        return {
            "attn_proj": self.attn_proj,
            "attn_score": self.attn_score,
            "clf_weight": self.clf_weight,
            "clf_bias": self.clf_bias,
        }


@dataclass
class MlpModel:
    """Affine -> ReLU -> affine over the flattened (row-major) bag."""

    hidden_weight: np.ndarray  # (H, input_size)
    hidden_bias: np.ndarray  # (H,)
    out_weight: np.ndarray  # (C, H)
    out_bias: np.ndarray  # (C,)

    @property
    def input_size(self) -> int:
        return self.hidden_weight.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.hidden_weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.out_weight.shape[0]

    @classmethod
    def initialize(
        cls,
        input_size: int,
        n_classes: int,
        hidden_width: int = DEFAULT_HIDDEN_WIDTH,
        seed: int = 0,
    ) -> "MlpModel":
        if hidden_width < 1 or n_classes < 2:
            raise ValueError("need hidden_width >= 1 and n_classes >= 2")
        rng = np.random.default_rng(seed_sequence(seed, "mlp-init"))
        return cls(
            hidden_weight=_uniform(rng, (hidden_width, input_size), input_size),
            hidden_bias=_uniform(rng, (hidden_width,), input_size),
            out_weight=_uniform(rng, (n_classes, hidden_width), hidden_width),
            out_bias=_uniform(rng, (n_classes,), hidden_width),
        )

    def params(self) -> Params:
        return {
            "hidden_weight": self.hidden_weight,
            "hidden_bias": self.hidden_bias,
            "out_weight": self.out_weight,
            "out_bias": self.out_bias,
        }


def softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max()
    return shifted - np.log(np.exp(shifted).sum())


def cross_entropy(logits: np.ndarray, soft_label: np.ndarray) -> float:
    return float(-(soft_label * log_softmax(logits)).sum())


def _amil_bag(model: AmilModel, bag: np.ndarray) -> np.ndarray:
    h = np.asarray(bag, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValueError(f"bag must be a non-empty 2-D matrix, got shape {h.shape}")
    if h.shape[1] != model.dim:
        raise ValueError(f"bag dim {h.shape[1]} != model dim {model.dim}")
    return h


def amil_forward(model: AmilModel, bag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits over classes plus the softmax attention weight of each bag row."""
    logits, attention, _ = _amil_forward_cached(model, bag)
    return logits, attention


def _amil_forward_cached(model: AmilModel, bag: np.ndarray):
    h = _amil_bag(model, bag)
    pre = h @ model.attn_proj.T  # (k, L)
    act = np.tanh(pre)
    scores = act @ model.attn_score  # (k,)
    attention = softmax(scores)
    pooled = attention @ h  # (dim,)
    logits = model.clf_weight @ pooled + model.clf_bias
    return logits, attention, (h, act, pooled)


def amil_backward(model: AmilModel, bag: np.ndarray, soft_label: np.ndarray) -> Params:
    """Exact gradients of the cross-entropy loss w.r.t. every parameter."""
    _, grads = amil_loss_and_grads(model, bag, soft_label)
    return grads


def amil_loss_and_grads(
    model: AmilModel, bag: np.ndarray, soft_label: np.ndarray
) -> tuple[float, Params]:
    logits, attention, (h, act, pooled) = _amil_forward_cached(model, bag)
    q = np.asarray(soft_label, dtype=np.float64)
    loss = cross_entropy(logits, q)

    d_logits = softmax(logits) - q  # (C,)
    d_clf_weight = np.outer(d_logits, pooled)
    d_clf_bias = d_logits
    d_pooled = model.clf_weight.T @ d_logits  # (dim,)
    d_attention = h @ d_pooled  # (k,)
    d_scores = attention * (d_attention - attention @ d_attention)  # softmax jacobian
    d_attn_score = act.T @ d_scores  # (L,)
    d_act = np.outer(d_scores, model.attn_score)  # (k, L)
    d_pre = d_act * (1.0 - act**2)
    d_attn_proj = d_pre.T @ h  # (L, dim)
    grads = {
        "attn_proj": d_attn_proj,
        "attn_score": d_attn_score,
        "clf_weight": d_clf_weight,
        "clf_bias": d_clf_bias,
    }
    return loss, grads


def _mlp_input(model: MlpModel, bag: np.ndarray) -> np.ndarray:
    x = np.asarray(bag, dtype=np.float64).ravel(order="C")
    if x.shape[0] != model.input_size:
        raise ValueError(f"flattened bag size {x.shape[0]} != model input {model.input_size}")
    return x


def mlp_forward(model: MlpModel, bag: np.ndarray) -> np.ndarray:
    x = _mlp_input(model, bag)
    hidden = np.maximum(model.hidden_weight @ x + model.hidden_bias, 0.0)
    return model.out_weight @ hidden + model.out_bias


def mlp_loss_and_grads(
    model: MlpModel, bag: np.ndarray, soft_label: np.ndarray
) -> tuple[float, Params]:
    x = _mlp_input(model, bag)
    q = np.asarray(soft_label, dtype=np.float64)
    pre = model.hidden_weight @ x + model.hidden_bias
    hidden = np.maximum(pre, 0.0)
    logits = model.out_weight @ hidden + model.out_bias
    loss = cross_entropy(logits, q)

    d_logits = softmax(logits) - q
    d_out_weight = np.outer(d_logits, hidden)
    d_out_bias = d_logits
    d_hidden = model.out_weight.T @ d_logits
    d_pre = d_hidden * (pre > 0.0)
    d_hidden_weight = np.outer(d_pre, x)
    d_hidden_bias = d_pre
    grads = {
        "hidden_weight": d_hidden_weight,
        "hidden_bias": d_hidden_bias,
        "out_weight": d_out_weight,
        "out_bias": d_out_bias,
    }
    return loss, grads


def mlp_backward(model: MlpModel, bag: np.ndarray, soft_label: np.ndarray) -> Params:
    _, grads = mlp_loss_and_grads(model, bag, soft_label)
    return grads


def model_forward(model, bag: np.ndarray) -> np.ndarray:
    if isinstance(model, AmilModel):
        return amil_forward(model, bag)[0]
    return mlp_forward(model, bag)


def model_loss_and_grads(model, bag: np.ndarray, soft_label: np.ndarray):
    if isinstance(model, AmilModel):
        return amil_loss_and_grads(model, bag, soft_label)
    return mlp_loss_and_grads(model, bag, soft_label)


def bag_loss(model, bag: np.ndarray, soft_label: np.ndarray) -> float:
    if isinstance(model, AmilModel):
        logits, _ = amil_forward(model, bag)
    else:
        logits = mlp_forward(model, bag)
    return cross_entropy(logits, np.asarray(soft_label, dtype=np.float64))


class AdamW:
    """Adam with decoupled weight decay: p -= lr * (mhat / (sqrt(vhat) + eps)) + lr * wd * p.

    With zero gradient the moments stay zero and each step shrinks a
    parameter by exactly (1 - lr * wd).
    """

    def __init__(self, params: Params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p -= c.learning_rate * update + c.learning_rate * c.weight_decay * p


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_loss: float


@dataclass
class TrainResult:
    model: object
    history: list[EpochStats]
    best_epoch: int
    best_val_accuracy: float


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def evaluate_bags(
    model, bags: list[np.ndarray], labels_onehot: np.ndarray
) -> tuple[float, float, np.ndarray]:
    """(mean loss, accuracy, argmax predictions) over a bag list."""
    losses = np.empty(len(bags))
    preds = np.empty(len(bags), dtype=np.int64)
    for i, bag in enumerate(bags):
        logits = model_forward(model, bag)
        losses[i] = cross_entropy(logits, labels_onehot[i])
        preds[i] = int(np.argmax(logits))
    truth = np.argmax(labels_onehot, axis=1)
    return float(losses.mean()), float((preds == truth).mean()), preds


def train(
    model,
    train_bags: list[np.ndarray],
    train_labels: np.ndarray,
    val_bags: list[np.ndarray],
    val_labels: np.ndarray,
    n_classes: int,
    cfg: TrainConfig = TrainConfig(),
    augment_cfg: aug.AugmentConfig | None = None,
) -> TrainResult:
    """AdamW training with per-epoch validation and best-accuracy checkpointing.

    Deterministic in (model init, data order, cfg.seed, augment seed): batch
    shuffling, augmentation draws and mixup pairing all derive from seeds,
    and per-batch gradients accumulate in sorted bag-index order.
    """
    if not train_bags or not val_bags:
        raise ValueError("train and validation sets must be non-empty")
    y_train = one_hot(np.asarray(train_labels), n_classes)
    y_val = one_hot(np.asarray(val_labels), n_classes)

    params = model.params()
    opt = AdamW(params, cfg)
    use_mixup = augment_cfg is not None and augment_cfg.enabled and augment_cfg.use_mixup

    history: list[EpochStats] = []
    best_epoch = -1
    best_acc = -1.0
    best_loss = np.inf
    best_params: Params | None = None

    n = len(train_bags)
    for epoch in range(1, cfg.epochs + 1):
        rng_epoch = np.random.default_rng(seed_sequence(cfg.seed, "train-epoch", epoch))
        order = rng_epoch.permutation(n)
        batch_losses: list[float] = []
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            mats: dict[int, np.ndarray] = {}
            for gi in batch:
                mat = np.asarray(train_bags[gi], dtype=np.float64)
                if augment_cfg is not None:
                    mat = aug.augment_matrix(
                        mat, augment_cfg, aug.bag_rng(augment_cfg, epoch, int(gi)), True
                    )
                mats[int(gi)] = mat
            examples: list[tuple[int, np.ndarray, np.ndarray]] = []
            if use_mixup:
                pairing = rng_epoch.permutation(len(batch))
                lams = rng_epoch.beta(augment_cfg.mixup_alpha, augment_cfg.mixup_alpha, size=len(batch))
                for pos, gi in enumerate(batch):
                    gj = int(batch[pairing[pos]])
                    lam = float(lams[pos])
                    mixed = aug.mix_matrices(mats[int(gi)], mats[gj], lam)
                    soft = lam * y_train[gi] + (1.0 - lam) * y_train[gj]
                    examples.append((int(gi), mixed, soft))
            else:
                for gi in batch:
                    examples.append((int(gi), mats[int(gi)], y_train[gi]))

            examples.sort(key=lambda e: e[0])
            total_grads: Params | None = None
            total_loss = 0.0
            for _, mat, soft in examples:
                loss, grads = model_loss_and_grads(model, mat, soft)
                total_loss += loss
                if total_grads is None:
                    total_grads = grads
                else:
                    for name in total_grads:
                        total_grads[name] += grads[name]
            assert total_grads is not None
            scale = 1.0 / len(examples)
            batch_loss = total_loss * scale
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch} (batch starting {start})"
                )
            for name in total_grads:
                total_grads[name] *= scale
            opt.step(params, total_grads)
            batch_losses.append(batch_loss)

        train_loss = float(np.mean(batch_losses))
        val_loss, val_acc, _ = evaluate_bags(model, val_bags, y_val)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochStats(epoch, train_loss, val_acc, val_loss))
        # best accuracy wins; equal accuracy prefers the better-margined
        # (lower val loss) epoch, then the earlier one
        if val_acc > best_acc or (val_acc == best_acc and val_loss < best_loss):
            best_acc = val_acc
            best_loss = val_loss
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}

    assert best_params is not None
    best_model = copy.deepcopy(model)
    for name, value in best_model.params().items():
        value[...] = best_params[name]
    return TrainResult(
        model=best_model, history=history, best_epoch=best_epoch, best_val_accuracy=best_acc
    )


def write_history(history: list[EpochStats], path: Path | str) -> None:
    lines = [HISTORY_HEADER]
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss:.6f},{h.val_accuracy:.4f},{h.val_loss:.6f}")
    feature_io._atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def _model_type(model) -> str:
    return "amil" if isinstance(model, AmilModel) else "mlp"


def save_checkpoint(path: Path | str, model, meta: dict | None = None) -> None:
    """JSON header line plus one float32 FVEC1 block per parameter tensor."""
    params = model.params()
    order = sorted(params)
    header = {
        "format": CHECKPOINT_FORMAT,
        "model_type": _model_type(model),
        "param_order": order,
        "shapes": {name: list(params[name].shape) for name in order},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    for name in order:
        tensor = params[name]
        as2d = tensor.reshape(1, -1) if tensor.ndim == 1 else tensor
        blob += feature_io.encode_fvec(as2d.astype(np.float32))
    feature_io._atomic_write_bytes(Path(path), blob)


def load_checkpoint(path: Path | str) -> tuple[object, dict]:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    offset = nl + 1
    tensors: Params = {}
    for name in header["param_order"]:
        shape = tuple(header["shapes"][name])
        flat = int(np.prod(shape))
        rows = 1 if len(shape) == 1 else shape[0]
        cols = flat // rows
        block_len = 13 + 4 * rows * cols
        tensor = feature_io.decode_fvec(data[offset : offset + block_len])
        tensors[name] = tensor.astype(np.float64).reshape(shape)
        offset += block_len
    if header["model_type"] == "amil":
        model = AmilModel(
            attn_proj=tensors["attn_proj"],
            attn_score=tensors["attn_score"],
            clf_weight=tensors["clf_weight"],
            clf_bias=tensors["clf_bias"],
        )
    elif header["model_type"] == "mlp":
        model = MlpModel(
            hidden_weight=tensors["hidden_weight"],
            hidden_bias=tensors["hidden_bias"],
            out_weight=tensors["out_weight"],
            out_bias=tensors["out_bias"],
        )
    else:
        raise UnsupportedClassifierError(f"unknown model_type {header['model_type']!r}")
    return model, header
