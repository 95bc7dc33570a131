"""Time the compiled and numpy kernel backends on the same inputs.

    python benchmarks/bench_kernels.py --n 4096 --k 3 --repeat 50
"""

import argparse
import timeit

import numpy as np

from csidn.kernels import backends


def make_inputs(n, k, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, k))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, k, size=n)
    r = rng.uniform(size=n)
    beta = rng.uniform(0.5, 2.0, size=n)
    mu = rng.uniform(0.5, 1.0, size=k)
    alpha = rng.uniform(size=(k, k))
    np.fill_diagonal(alpha, 0.0)
    alpha /= alpha.sum(axis=1, keepdims=True)
    T = rng.uniform(size=(n, k, k))
    T /= T.sum(axis=2, keepdims=True)
    return probs, labels, r, beta, mu, alpha, T


def bench(n, k, repeat, seed=0):
    probs, labels, r, beta, mu, alpha, T = make_inputs(n, k, seed)
    cases = {
        "ilfc_loss_grad": lambda m: m.ilfc_loss_grad(probs, labels, r, beta, mu, alpha, 1e-3, 1e-12),
        "corrected_loss_grad": lambda m: m.corrected_loss_grad(probs, labels, T, 1e-12),
        "assemble_stack": lambda m: m.assemble_stack(labels, r, beta, mu, alpha, 1e-3),
    }
    rows = []
    for name, fn in cases.items():
        timings = {}
        for backend, mod in backends().items():
            fn(mod)  # warm-up
            timings[backend] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat))
        rows.append((name, timings))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=4096, help="samples per call")
    p.add_argument("--k", type=int, default=3, help="classes")
    p.add_argument("--repeat", type=int, default=50)
    args = p.parse_args(argv)
    rows = bench(args.n, args.k, args.repeat)
    print(f"n={args.n} k={args.k}, best of {args.repeat} (ms)")
    for name, t in rows:
        py = t["python"] * 1e3
        if "cython" in t:
            cy = t["cython"] * 1e3
            print(f"{name:22s} python {py:8.3f}  cython {cy:8.3f}  speedup {py / cy:6.1f}x")
        else:
            print(f"{name:22s} python {py:8.3f}  cython (not built)")


if __name__ == "__main__":
    main()
