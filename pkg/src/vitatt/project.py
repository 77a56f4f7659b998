"""Exact t-SNE of class-token embeddings and a silhouette separation score."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import MetadataSchema, encode_batch
from .model import VitAttParams, forward
from .tensor import no_grad


@dataclass
class EmbeddingSet:
    stage: str  # pre_fusion | post_fusion
    vectors: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)


def collect_embeddings(params: VitAttParams, samples, schema: MetadataSchema,
                       batch_size: int = 64) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Class-token rows right before and right after the fusion layer."""
    images, meta, labels = encode_batch(samples, schema)
    pre, post = [], []
    for s in range(0, len(samples), batch_size):
        m = None if params.config.image_only else meta[s:s + batch_size]
        with no_grad():
            _, trace = forward(params, images[s:s + batch_size], m, training=False)
        pre.append(trace.pre_fusion_cls)
        post.append(trace.post_fusion_cls)
    ids = [s.id for s in samples]
    return (
        EmbeddingSet("pre_fusion", np.concatenate(pre), labels, ids),
        EmbeddingSet("post_fusion", np.concatenate(post), labels, ids),
    )


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def joint_probabilities(X: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    """Symmetrized affinities P (sums to 1) and the per-point row entropies."""
    n = X.shape[0]
    cond, betas, entropies = _kernels.perplexity_search(squared_distances(X), math.log(perplexity), tol, max_iter)
    P = (cond + cond.T) / (2.0 * n)
    return P, betas, entropies


def auto_learning_rate(n: int) -> float:
    return float(min(max(n / 12.0, 10.0), 200.0))


@dataclass
class TSNEResult:
    coords: np.ndarray
    kl: np.ndarray  # KL(P || Q) before each update
    P: np.ndarray
    entropies: np.ndarray


def tsne_3d(data, perplexity: float = 30.0, iters: int = 1000, seed: int = 0,
            learning_rate: float | str = "auto", exaggeration: float = 12.0, exaggeration_iters: int = 250,
            momentum: tuple[float, float] = (0.5, 0.8), dims: int = 3) -> TSNEResult:
    """Exact O(N^2) t-SNE with early exaggeration, momentum and per-coordinate gains.

    ``learning_rate="auto"`` uses N / 12 clipped to [10, 200]; a fixed 200
    keeps oscillating after convergence when N is only a few hundred points.
    """
    X = np.array(data.vectors if isinstance(data, EmbeddingSet) else data, dtype=np.float64)
    n = X.shape[0]
    if n < 4:
        raise ValueError(f"t-SNE needs at least 4 points, got {n}")
    if not perplexity < n / 3:
        raise ValueError(f"perplexity {perplexity} must be below N/3 = {n / 3:.3f}")
    if not np.isfinite(X).all():
        raise ValueError("t-SNE input has non-finite values")
    if learning_rate == "auto":
        learning_rate = auto_learning_rate(n)
    rng = np.random.default_rng(seed)
    d = squared_distances(X)
    np.fill_diagonal(d, np.inf)
    if (d == 0).any():
        X = X + 1e-10 * rng.standard_normal(X.shape)
    P, _, entropies = joint_probabilities(X, perplexity)
    Y = rng.normal(0.0, 1e-4, size=(n, dims))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl = np.zeros(iters)
    for it in range(iters):
        early = it < exaggeration_iters
        grad, kl[it] = _kernels.tsne_grad(Y, P, exaggeration if early else 1.0)
        same = (grad > 0) == (update > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = (momentum[0] if early else momentum[1]) * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
    return TSNEResult(Y, kl, P, entropies)


def separation_score(X, labels) -> float:
    """Mean Euclidean silhouette; points in singleton clusters score 0."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("separation_score needs at least two labels")
    return float(_kernels.silhouette_samples(X, labels).mean())


def write_coordinates(path, sets: list[tuple[EmbeddingSet, np.ndarray]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "z", "label", "stage"])
        for es, coords in sets:
            for sid, c, y in zip(es.ids, coords, es.labels):
                w.writerow([sid, *(repr(float(v)) for v in c[:3]), int(y), es.stage])
