"""Gradient-weighted attention relevancy maps.

For every recorded attention layer (encoder blocks first, fusion last) the
head-averaged positive part of grad(A) * A is folded into a relevancy matrix
``R <- R + Abar @ R`` that starts as the identity. Encoder layers only see the
image tokens, so they update the leading (P+1) x (P+1) block; the fusion layer
updates the whole matrix. The class-token row of R, minus its self entry, is
the map.

This keeps the positive-contribution core of the multimodal relevancy rule
and drops its residual/value normalization terms.
"""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import _kernels
from . import tensor as T
from .data import MetadataSchema, encode_batch
from .model import ForwardTrace, VitAttParams, forward

COLD = np.array([0.0, 0.0, 255.0])
HOT = np.array([255.0, 0.0, 0.0])


class TraceError(RuntimeError):
    pass


@dataclass
class RelevancyMap:
    target_class: int
    image_grid: np.ndarray  # (g, g) in [0, 1]
    metadata_scores: np.ndarray  # (M,) in [0, 1]
    raw_token_scores: np.ndarray  # class-token row of R, all T tokens, unnormalized


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(initial=np.inf), x.max(initial=-np.inf)
    if x.size == 0 or hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def relevancy_matrix(trace: ForwardTrace, index: int = 0) -> np.ndarray:
    if not trace.attentions:
        raise TraceError("trace not recorded with attention maps")
    if any(rec.grad is None for rec in trace.attentions):
        raise TraceError("trace not recorded with gradients")
    size = trace.attentions[-1].attn.shape[-1]
    R = np.eye(size)
    for rec in trace.attentions:
        A = np.ascontiguousarray(rec.attn.data[index])
        G = np.ascontiguousarray(rec.grad[index])
        R = _kernels.rollout_update(R, _kernels.head_mean_positive(G, A), A.shape[-1])
    return R


def relevancy_propagate(trace: ForwardTrace, target_class: int, index: int = 0,
                        num_patches: int | None = None) -> RelevancyMap:
    """Relevancy map of batch item ``index``; the trace must already hold
    gradients of ``logits[index, target_class]``."""
    R = relevancy_matrix(trace, index)
    raw = R[0].copy()
    if num_patches is None:
        num_patches = next(r for r in trace.attentions if r.kind == "encoder").attn.shape[-1] - 1
    scores = minmax(raw[1:])
    g = int(round(np.sqrt(num_patches)))
    return RelevancyMap(
        int(target_class),
        scores[:num_patches].reshape(g, g),
        scores[num_patches:],
        raw,
    )


def explain_batch(params: VitAttParams, images, metadata, targets) -> list[RelevancyMap]:
    """Forward in eval mode, back-propagate each item's target logit, propagate."""
    targets = np.asarray(targets, dtype=np.int64)
    meta = None if params.config.image_only else metadata
    logits, trace = forward(params, images, meta, training=False, record=True)
    seed = np.zeros_like(logits.data)
    seed[np.arange(len(targets)), targets] = 1.0
    T.backward(logits, seed_grad=seed)
    params.zero_grad()
    P = params.config.num_patches
    return [relevancy_propagate(trace, t, i, P) for i, t in enumerate(targets)]


def explain_samples(params: VitAttParams, samples, schema: MetadataSchema, targets=None,
                    batch_size: int = 32) -> list[RelevancyMap]:
    images, meta, labels = encode_batch(samples, schema)
    targets = labels if targets is None else np.asarray(targets)
    out = []
    for s in range(0, len(samples), batch_size):
        out.extend(explain_batch(params, images[s:s + batch_size], meta[s:s + batch_size], targets[s:s + batch_size]))
    return out


# ------------------------------------------------------------ class averages

@dataclass
class ClassRelevancy:
    class_names: list[str]
    field_names: list[str]
    matrix: np.ndarray  # (C, M); NaN rows for classes without samples
    counts: np.ndarray
    annotations: list[list[str]]

    @property
    def empty_classes(self) -> list[str]:
        return [self.class_names[c] for c in np.flatnonzero(self.counts == 0)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", *self.field_names])
            for c, name in enumerate(self.class_names):
                w.writerow([name, *("nan" if np.isnan(v) else repr(float(v)) for v in self.matrix[c])])

    def annotations_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", *self.field_names])
            for c, name in enumerate(self.class_names):
                w.writerow([name, *self.annotations[c]])


def _summarize(values, kind: str) -> str:
    if not values:
        return ""
    if kind == "binary":
        t = sum(1 for v in values if v)
        return f"T:{t} F:{len(values) - t}"
    if kind == "categorical":
        return " ".join(f"{lv}:{n}" for lv, n in Counter(values).most_common(2))
    return f"mean={np.mean(values):.2f}"


def class_average_metadata_relevancy(params: VitAttParams, samples, schema: MetadataSchema,
                                     class_names=None, maps=None) -> ClassRelevancy:
    """Mean metadata relevancy per true class, plus per-cell value summaries."""
    C = params.config.num_classes
    names = list(class_names) if class_names is not None else [str(c) for c in range(C)]
    if maps is None:
        maps = explain_samples(params, samples, schema)
    M = schema.num_slots
    sums = np.zeros((C, M))
    counts = np.zeros(C, dtype=np.int64)
    for s, m in zip(samples, maps):
        sums[s.label] += m.metadata_scores
        counts[s.label] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        matrix = sums / counts[:, None]
    matrix[counts == 0] = np.nan
    ann = []
    for c in range(C):
        members = [s for s in samples if s.label == c]
        ann.append([_summarize([s.metadata[f.name] for s in members], f.kind) for f in schema.fields])
    return ClassRelevancy(names, schema.names, matrix, counts, ann)


# ------------------------------------------------------------------ rendering

def render_saliency(rmap: RelevancyMap, base_image: np.ndarray, path=None, alpha: float = 0.5) -> np.ndarray:
    """Nearest-neighbor upscaled heat overlay on a (3, H, W) [0,1] image.

    Returns the blended uint8 (H, W, 3) array; writes it when ``path`` is given.
    """
    grid = np.asarray(rmap.image_grid)
    H, W = base_image.shape[1:]
    g = grid.shape[0]
    if H % g or W % g:
        raise ValueError(f"image {H}x{W} not divisible by grid {g}")
    up = np.repeat(np.repeat(grid, H // g, axis=0), W // g, axis=1)
    color = up[..., None] * HOT + (1.0 - up[..., None]) * COLD
    base = np.asarray(base_image).transpose(1, 2, 0) * 255.0
    out = np.clip(np.round((1.0 - alpha) * base + alpha * color), 0, 255).astype(np.uint8)
    if path is not None:
        Image.fromarray(out, "RGB").save(path)
    return out
