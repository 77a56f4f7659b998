"""Training recipe: class-weighted cross entropy, class-weighted sampling with
replacement, Adam with separate learning rates for encoder and other layers."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import MetadataSchema, encode_batch
from .metrics import MetricsReport, compute_metrics
from .model import ENCODER, OTHER, VitAttParams, forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr_encoder: float = 3e-5
    lr_other: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm in training mode)")
        if self.lr_encoder < 0 or self.lr_other < 0:
            raise ValueError("learning rates must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


def class_weights(train_labels, num_classes: int | None = None) -> np.ndarray:
    """Inverse-frequency weights N / (C n_c); their sample-weighted mean is 1."""
    labels = np.asarray(train_labels, dtype=np.int64)
    C = num_classes if num_classes is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=C).astype(np.float64)
    if (counts == 0).any():
        raise ValueError(f"class_weights: classes {np.flatnonzero(counts == 0).tolist()} have no samples")
    return len(labels) / (C * counts)


class WeightedSampler:
    """With-replacement index stream, P(i) proportional to weight[label_i]."""

    def __init__(self, labels, weights, seed=0):
        labels = np.asarray(labels, dtype=np.int64)
        w = np.asarray(weights, dtype=np.float64)[labels]
        if (w < 0).any() or w.sum() <= 0:
            raise ValueError("sampler weights must be non-negative and not all zero")
        self.p = w / w.sum()
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def draw(self, n: int) -> np.ndarray:
        return self.rng.choice(len(self.p), size=n, replace=True, p=self.p)

    def __iter__(self):
        while True:
            yield from self.draw(1024)


def weighted_sampler(labels, weights, seed=0) -> WeightedSampler:
    return WeightedSampler(labels, weights, seed)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, state: AdamState, group_lrs: dict[str, float], groups: dict[str, str],
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update in place, learning rate chosen by parameter group."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        lr = group_lrs[groups[name]]
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TrainResult:
    best: VitAttParams
    final: VitAttParams
    history: list[dict]
    best_epoch: int
    class_weights: np.ndarray

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_macro_acc"]
        for h in self.history:
            lines.append(f"{h['epoch']},{h['train_loss']!r},{h['val_macro_acc']!r}")
        return "\n".join(lines) + "\n"


def predict_proba(params: VitAttParams, images, metadata, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        meta = None if params.config.image_only else metadata[s:s + batch_size]
        with T.no_grad():
            logits, _ = forward(params, images[s:s + batch_size], meta, training=False)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, params.config.num_classes))


def evaluate(params: VitAttParams, samples, schema: MetadataSchema, class_names=None) -> MetricsReport:
    images, meta, labels = encode_batch(samples, schema)
    return compute_metrics(labels, predict_proba(params, images, meta), class_names)


def train(params: VitAttParams, train_samples, val_samples, schema: MetadataSchema,
          config: TrainConfig, rng: np.random.Generator | None = None) -> TrainResult:
    """Train in place; returns the best-validation snapshot and the history.

    Each epoch draws ceil(N / batch_size) full batches from the weighted
    sampler. The best checkpoint is the one with the highest validation
    macro accuracy, earliest epoch on ties.
    """
    cfg = params.config
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    images, meta, labels = encode_batch(train_samples, schema)
    v_images, v_meta, v_labels = encode_batch(val_samples, schema) if val_samples else (None, None, None)
    weights = class_weights(labels, cfg.num_classes)
    sampler = WeightedSampler(labels, weights, rng)
    n_batches = math.ceil(len(labels) / config.batch_size)
    lrs = {ENCODER: config.lr_encoder, OTHER: config.lr_other}
    state = AdamState()
    history = []
    best, best_epoch, best_score = params.copy(), 0, -np.inf
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for step in range(n_batches):
            idx = sampler.draw(config.batch_size)
            params.zero_grad()
            logits, _ = forward(
                params, images[idx], None if cfg.image_only else meta[idx], training=True
            )
            loss = T.cross_entropy_weighted(logits, labels[idx], weights)
            value = loss.item()
            if not math.isfinite(value):
                raise T.NumericError(f"loss diverged to {value} at epoch {epoch}, step {step + 1}")
            T.backward(loss)
            adam_step(
                params.tensors, state, lrs, params.groups, config.beta1, config.beta2,
                config.adam_eps, config.weight_decay,
            )
            total += value
        if v_images is not None:
            probs = predict_proba(params, v_images, v_meta)
            val_acc = compute_metrics(v_labels, probs).macro["ACC"]
        else:
            val_acc = float("nan")
        history.append({"epoch": epoch, "train_loss": total / n_batches, "val_macro_acc": val_acc})
        log.debug("epoch %d loss %.5f val macro-ACC %.4f", epoch, total / n_batches, val_acc)
        if v_images is None or val_acc > best_score:
            best, best_epoch, best_score = params.copy(), epoch, val_acc
    return TrainResult(best, params, history, best_epoch, weights)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
