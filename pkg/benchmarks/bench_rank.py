"""Time the compiled ranking kernel against the numpy fallback.

    python benchmarks/bench_rank.py [--repeat 5]

Both kernels are fed the same random (order, positive, junk) arrays at a few
query/gallery sizes; their outputs are checked for equality before timing.
"""
import argparse
import timeit

import numpy as np

from ccreid.evaluation import _rank_py

try:
    from ccreid.evaluation import _rank_cy
except ImportError:
    _rank_cy = None

SIZES = [(100, 500), (500, 2000), (1000, 5000)]


def make_inputs(nq, ng, seed=0):
    rng = np.random.default_rng(seed)
    dist = rng.random((nq, ng))
    order = np.argsort(dist, axis=1, kind="stable").astype(np.int64)
    pids_q = rng.integers(0, nq // 5 + 1, nq)
    pids_g = rng.integers(0, nq // 5 + 1, ng)
    positive = (pids_q[:, None] == pids_g[None, :]).astype(np.uint8)
    junk = (rng.random((nq, ng)) < 0.05).astype(np.uint8)
    return order, positive, junk


def check_equal(a, b):
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _rank_cy is None:
        print("compiled kernel not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'queries':>8} {'gallery':>8} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for nq, ng in SIZES:
        inputs = make_inputs(nq, ng)
        t_py = min(timeit.repeat(lambda: _rank_py.evaluate_ranked(*inputs), number=1, repeat=args.repeat))
        if _rank_cy is None:
            print(f"{nq:>8} {ng:>8} {t_py * 1e3:>10.1f} {'-':>10} {'-':>8}")
            continue
        check_equal(_rank_py.evaluate_ranked(*inputs), _rank_cy.evaluate_ranked(*inputs))
        t_cy = min(timeit.repeat(lambda: _rank_cy.evaluate_ranked(*inputs), number=1, repeat=args.repeat))
        print(f"{nq:>8} {ng:>8} {t_py * 1e3:>10.1f} {t_cy * 1e3:>10.2f} {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
