"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--n 300] [--repeats 5]

Each numba kernel is called once before timing so compilation is excluded.
Outputs of both paths are compared before anything is timed.
"""
import argparse
import math
import timeit

import numpy as np

from vitatt import _kernels as K


def cases(n: int, rng: np.random.Generator):
    X = rng.normal(size=(n, 16))
    d2 = ((X[:, None] - X[None]) ** 2).sum(-1)
    cond, _, _ = K.NUMPY_KERNELS["perplexity_search"](d2, math.log(30.0), 1e-5, 200)
    P = (cond + cond.T) / (2 * n)
    Y = rng.normal(size=(n, 3))
    T = 16 + 1 + 8
    return {
        "perplexity_search": (d2, math.log(30.0), 1e-5, 200),
        "tsne_grad": (Y, P, 1.0),
        "rank_auc": (rng.integers(0, 50, 20 * n).astype(float), rng.uniform(size=20 * n) < 0.3),
        "silhouette_samples": (X, rng.integers(0, 4, n)),
        "head_mean_positive": (rng.normal(size=(2, T, T)), rng.uniform(size=(2, T, T))),
        "rollout_update": (np.eye(T), rng.uniform(size=(T, T)), T),
    }


def agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return bool(np.allclose(a, b, rtol=1e-9, atol=1e-12, equal_nan=True))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=300, help="points for the t-SNE/silhouette kernels")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if not K.NUMBA_KERNELS:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"active backend: {K.backend()}  (n={args.n}, best of {args.repeats})")
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for name, call_args in cases(args.n, rng).items():
        np_fn, nb_fn = K.NUMPY_KERNELS[name], K.NUMBA_KERNELS[name]
        ok = agree(np_fn(*call_args), nb_fn(*call_args))  # also compiles the numba version
        t_np = min(timeit.repeat(lambda: np_fn(*call_args), number=1, repeat=args.repeats)) * 1e3
        t_nb = min(timeit.repeat(lambda: nb_fn(*call_args), number=1, repeat=args.repeats)) * 1e3
        print(f"{name:<20} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.1f}x  {ok}")


if __name__ == "__main__":
    main()
