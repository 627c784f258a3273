"""Benchmark the compiled field-recursion core against the numpy fallback.

Runs the per-chunk field + sensitivity solve at several problem sizes
and prints a timing table.  Usage: python benchmarks/bench_backends.py
"""

import time

import numpy as np

from kernelflow.backends import get_backend
from kernelflow.fields import build_couplings
from kernelflow.grids import TimeGrid

SIZES = [
    # (P, T, chunk, responses)
    (4, 16, 64, True),
    (10, 25, 64, True),
    (10, 25, 64, False),
    (20, 12, 64, True),
]


def bench(be, u, r, coup, want_resp, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        be.field_chunk(
            u, r, coup.mh, coup.mz, coup.act, coup.decay_t, want_resp, want_resp, False
        )
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    backends = []
    for name in ("numpy", "cython"):
        try:
            backends.append((name, get_backend(name)))
        except ImportError:
            print(f"[{name} backend unavailable]")
    print(f"{'P':>3} {'T':>3} {'chunk':>5} {'resp':>5} " + "".join(f"{n:>12}" for n, _ in backends) + f"{'speedup':>9}")
    for p, t, chunk, resp in SIZES:
        grid = TimeGrid(t, 0.2)
        pt = p * t
        m = rng.standard_normal((pt, pt))
        cov = m @ m.T / pt
        coup = build_couplings(
            cov, cov, None, None, rng.standard_normal((p, t)), grid, "tanh", 1.0
        )
        u = np.ascontiguousarray(rng.standard_normal((chunk, t, p)))
        r = np.ascontiguousarray(rng.standard_normal((chunk, t, p)))
        times = [bench(be, u, r, coup, resp) for _, be in backends]
        row = f"{p:>3} {t:>3} {chunk:>5} {str(resp):>5} "
        row += "".join(f"{dt * 1e3:>10.1f}ms" for dt in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>8.2f}x"
        print(row)


if __name__ == "__main__":
    main()
