"""Time the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from ser_returns import _pykernels

try:
    from ser_returns import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def softmax_case(batch=256, rows=10, cols=10, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, rows, cols))
    mask = np.ones_like(x, dtype=np.uint8)
    mask[:, :, 6:] = rng.random((batch, 1, cols - 6)) < 0.5
    mask[:, :, 0] = 1
    g = rng.normal(size=x.shape)
    return x, mask, g


def gibbs_case(n_words=20_000, V=500, D=1000, K=8, seed=0):
    rng = np.random.default_rng(seed)
    words = rng.integers(0, V, n_words).astype(np.int64)
    docs = np.sort(rng.integers(0, D, n_words)).astype(np.int64)
    z = rng.integers(0, K, n_words).astype(np.int64)
    n_dk = np.zeros((D, K), np.int64)
    n_kw = np.zeros((K, V), np.int64)
    n_k = np.zeros(K, np.int64)
    np.add.at(n_dk, (docs, z), 1)
    np.add.at(n_kw, (z, words), 1)
    np.add.at(n_k, z, 1)
    return [words, docs, z, n_dk, n_kw, n_k, rng.random(n_words)]


def bench(impl, repeat):
    x, mask, g = softmax_case()
    s = impl.masked_softmax_fwd(x, mask)
    state = gibbs_case()
    out = {
        "softmax forward": min(timeit.repeat(lambda: impl.masked_softmax_fwd(x, mask), number=1, repeat=repeat)),
        "softmax backward": min(timeit.repeat(lambda: impl.masked_softmax_bwd(s, g), number=1, repeat=repeat)),
        # the sweep mutates its state, which is fine for timing
        "gibbs sweep": min(timeit.repeat(lambda: impl.gibbs_sweep(*state, 50 / 8, 0.01), number=1, repeat=repeat)),
    }
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    py = bench(_pykernels, args.repeat)
    if _ckernels is None:
        print("compiled extension unavailable; python timings only")
    cy = bench(_ckernels, args.repeat) if _ckernels is not None else {}
    print(f"{'kernel':<18}{'python (s)':>12}{'cython (s)':>12}{'speedup':>10}")
    for name, t in py.items():
        c = cy.get(name)
        extra = f"{c:12.5f}{t / c:9.1f}x" if c else f"{'-':>12}{'-':>10}"
        print(f"{name:<18}{t:12.5f}{extra}")


if __name__ == "__main__":
    main()
