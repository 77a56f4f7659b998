"""Hot numeric loops with a numba path and a pure-numpy path.

The numba versions are compiled with ``@njit`` when numba imports and
``VITATT_DISABLE_NUMBA`` is unset (or ``0``). Both paths are always
importable from ``NUMPY_KERNELS`` / ``NUMBA_KERNELS`` so tests and the
benchmark can compare them directly.

``rollout_update`` and ``head_mean_positive`` fix their summation order in
both paths, so the two produce bitwise-identical results.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_flag = os.environ.get("VITATT_DISABLE_NUMBA", "0").strip().lower()
USE_NUMBA = numba is not None and _flag in ("", "0", "false", "no")

_TINY = 1e-12


# --------------------------------------------------------------------- numpy

def _np_perplexity_search(dist2, target_entropy, tol, max_iter):
    n = dist2.shape[0]
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)
    for i in range(n):
        d = np.delete(dist2[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, -np.inf, np.inf
        for _ in range(max_iter):
            p = np.exp(-d * beta)
            sp = p.sum()
            h = np.log(sp) + beta * (d * p).sum() / sp
            diff = h - target_entropy
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
        row = p / sp
        P[i, :i] = row[:i]
        P[i, i + 1:] = row[i:]
        betas[i] = beta
        entropies[i] = h
    return P, betas, entropies


def _np_tsne_grad(Y, P, exaggeration):
    sq = (Y * Y).sum(axis=1)
    num = 1.0 / (1.0 + sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T)
    np.fill_diagonal(num, 0.0)
    Q = num / num.sum()
    W = (exaggeration * P - Q) * num
    grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
    mask = P > 0
    kl = float((P[mask] * np.log(P[mask] / np.maximum(Q[mask], _TINY))).sum())
    return grad, kl


def _np_average_ranks(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(n)
    starts = np.r_[0, np.flatnonzero(np.diff(xs)) + 1]
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _np_rank_auc(scores, positive):
    n_pos = int(positive.sum())
    n_neg = positive.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return np.nan
    r = _np_average_ranks(scores)
    return (r[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _np_silhouette_samples(X, labels):
    d = np.sqrt(np.maximum(((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=-1), 0.0))
    classes = np.unique(labels)
    n = X.shape[0]
    means = np.zeros((n, classes.shape[0]))
    counts = np.zeros(classes.shape[0])
    for k, c in enumerate(classes):
        members = labels == c
        counts[k] = members.sum()
        means[:, k] = d[:, members].sum(axis=1)
    s = np.zeros(n)
    for i in range(n):
        k = int(np.searchsorted(classes, labels[i]))
        if counts[k] <= 1:
            continue
        a = means[i, k] / (counts[k] - 1)
        others = np.delete(means[i] / counts, k)
        b = others.min()
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return s


def _np_head_mean_positive(grad, attn):
    c = np.maximum(grad * attn, 0.0)
    s = c[0].copy()
    for h in range(1, c.shape[0]):
        s = s + c[h]
    return s / c.shape[0]


def _np_rollout_update(R, Abar, n):
    blk = R[:n, :n]
    acc = np.zeros((n, n))
    for k in range(n):
        acc = acc + Abar[:, k:k + 1] * blk[k:k + 1, :]
    out = R.copy()
    out[:n, :n] = blk + acc
    return out


NUMPY_KERNELS = {
    "perplexity_search": _np_perplexity_search,
    "tsne_grad": _np_tsne_grad,
    "rank_auc": _np_rank_auc,
    "silhouette_samples": _np_silhouette_samples,
    "head_mean_positive": _np_head_mean_positive,
    "rollout_update": _np_rollout_update,
}


# --------------------------------------------------------------------- numba

def _nb_perplexity_search(dist2, target_entropy, tol, max_iter):
    n = dist2.shape[0]
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)
    row = np.empty(n)
    for i in range(n):
        dmin = np.inf
        for j in range(n):
            if j != i and dist2[i, j] < dmin:
                dmin = dist2[i, j]
        beta, lo, hi = 1.0, -np.inf, np.inf
        sp = 0.0
        h = 0.0
        for _ in range(max_iter):
            sp = 0.0
            sdp = 0.0
            for j in range(n):
                if j == i:
                    row[j] = 0.0
                    continue
                dj = dist2[i, j] - dmin
                pj = np.exp(-dj * beta)
                row[j] = pj
                sp += pj
                sdp += dj * pj
            h = np.log(sp) + beta * sdp / sp
            diff = h - target_entropy
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
        for j in range(n):
            P[i, j] = row[j] / sp
        betas[i] = beta
        entropies[i] = h
    return P, betas, entropies


def _nb_tsne_grad(Y, P, exaggeration):
    n, dim = Y.shape
    num = np.zeros((n, n))
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d = 0.0
            for k in range(dim):
                t = Y[i, k] - Y[j, k]
                d += t * t
            v = 1.0 / (1.0 + d)
            num[i, j] = v
            num[j, i] = v
            total += 2.0 * v
    grad = np.zeros((n, dim))
    kl = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            q = num[i, j] / total
            p = P[i, j]
            if p > 0:
                kl += p * np.log(p / max(q, _TINY))
            w = (exaggeration * p - q) * num[i, j]
            for k in range(dim):
                grad[i, k] += 4.0 * w * (Y[i, k] - Y[j, k])
    return grad, kl


def _nb_rank_auc(scores, positive):
    n = scores.shape[0]
    n_pos = 0
    for i in range(n):
        if positive[i]:
            n_pos += 1
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return np.nan
    order = np.argsort(scores, kind="mergesort")
    rank_sum = 0.0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg = (i + j + 2) / 2.0
        for k in range(i, j + 1):
            if positive[order[k]]:
                rank_sum += avg
        i = j + 1
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _nb_silhouette_samples(X, labels):
    n, dim = X.shape
    classes = np.unique(labels)
    kc = classes.shape[0]
    counts = np.zeros(kc)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        for k in range(kc):
            if labels[i] == classes[k]:
                idx[i] = k
                counts[k] += 1
    s = np.zeros(n)
    sums = np.zeros(kc)
    for i in range(n):
        if counts[idx[i]] <= 1:
            continue
        sums[:] = 0.0
        for j in range(n):
            d = 0.0
            for k in range(dim):
                t = X[i, k] - X[j, k]
                d += t * t
            sums[idx[j]] += np.sqrt(d)
        a = sums[idx[i]] / (counts[idx[i]] - 1)
        b = np.inf
        for k in range(kc):
            if k != idx[i]:
                b = min(b, sums[k] / counts[k])
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return s


def _nb_head_mean_positive(grad, attn):
    heads, rows, cols = attn.shape
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            s = max(grad[0, i, j] * attn[0, i, j], 0.0)
            for h in range(1, heads):
                s = s + max(grad[h, i, j] * attn[h, i, j], 0.0)
            out[i, j] = s / heads
    return out


def _nb_rollout_update(R, Abar, n):
    out = R.copy()
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc = acc + Abar[i, k] * R[k, j]
            out[i, j] = R[i, j] + acc
    return out


_NB_SOURCES = {
    "perplexity_search": _nb_perplexity_search,
    "tsne_grad": _nb_tsne_grad,
    "rank_auc": _nb_rank_auc,
    "silhouette_samples": _nb_silhouette_samples,
    "head_mean_positive": _nb_head_mean_positive,
    "rollout_update": _nb_rollout_update,
}

if numba is not None:
    NUMBA_KERNELS = {k: numba.njit(cache=True, nogil=True)(f) for k, f in _NB_SOURCES.items()}
else:  # pragma: no cover
    NUMBA_KERNELS = {}

_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

perplexity_search = _active["perplexity_search"]
tsne_grad = _active["tsne_grad"]
rank_auc = _active["rank_auc"]
silhouette_samples = _active["silhouette_samples"]
head_mean_positive = _active["head_mean_positive"]
rollout_update = _active["rollout_update"]


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
