"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--n 30000] [--repeat 20]

Prints one line per (kernel, backend) with the best wall time and the speedup
of the compiled backend over the numpy one. Results of the two backends are
also compared so a silent divergence shows up here as well.
"""

import argparse
import timeit

import numpy as np

from natmed import kernels


def _inputs(n, p, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.binomial(1, 0.5, (n, p - 1))]).astype(float)
    beta = rng.normal(scale=0.5, size=p)
    eta = X @ beta
    y = rng.binomial(1, 1 / (1 + np.exp(-eta))).astype(float)
    w = rng.uniform(0.5, 4.0, n)
    codes = rng.integers(0, 64, n)
    return X, eta, y, w, codes


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=30000)
    ap.add_argument("--p", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    X, eta, y, w, codes = _inputs(args.n, args.p)
    backends = kernels.available_backends()
    calls = {
        "irls_accumulate": lambda k: k.irls_accumulate(X, eta, y, w, True),
        "cell_sums": lambda k: k.cell_sums(codes, y, w, 64),
    }
    print(f"n={args.n} p={args.p} backends={','.join(backends)}")
    for name, call in calls.items():
        times = {}
        outs = {}
        for b in backends:
            mod = kernels.get_backend(b)
            outs[b] = call(mod)
            times[b] = min(timeit.repeat(lambda: call(mod), number=1, repeat=args.repeat))
        for b in backends:
            print(f"{name:16s} {b:7s} {times[b] * 1e3:9.3f} ms")
        if "cython" in times:
            print(f"{name:16s} speedup {times['python'] / times['cython']:9.2f}x")
            for a, c in zip(outs["python"], outs["cython"]):
                np.testing.assert_allclose(a, c, rtol=1e-10, atol=1e-10)


if __name__ == "__main__":
    main()
