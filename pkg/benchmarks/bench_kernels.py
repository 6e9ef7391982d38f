"""Time the compiled MLP kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Prints one row per (batch, widths) case with the per-call time of each
backend and the speedup. Results are also checked for agreement.
"""
import argparse
import timeit

import numpy as np

from fedmix import _pykernels

try:
    from fedmix import _ckernels
except ImportError:
    _ckernels = None

CASES = [
    (16, (16, 16, 4)),
    (64, (16, 32, 4)),
    (256, (16, 32, 4)),
    (64, (64, 128, 64, 10)),
    (1024, (64, 128, 64, 10)),
]


def make_case(batch, widths, seed=0):
    rng = np.random.default_rng(seed)
    Ws = [rng.normal(scale=0.3, size=(a, b)) for a, b in zip(widths, widths[1:])]
    bs = [rng.normal(scale=0.1, size=b) for b in widths[1:]]
    X = rng.normal(size=(batch, widths[0]))
    G = rng.normal(size=(batch, widths[-1]))
    return Ws, bs, X, G


def time_backend(impl, Ws, bs, X, G, repeat):
    def step():
        acts = impl.mlp_forward(Ws, bs, X)
        impl.mlp_backward(Ws, acts, G)

    per_call = min(timeit.repeat(step, number=repeat, repeat=5)) / repeat
    return per_call, impl.mlp_forward(Ws, bs, X)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'batch':>6} {'widths':<20} {'numpy us':>10} {'cython us':>10} {'speedup':>8}")
    for batch, widths in CASES:
        Ws, bs, X, G = make_case(batch, widths)
        t_py, a_py = time_backend(_pykernels, Ws, bs, X, G, args.repeat)
        if _ckernels is None:
            print(f"{batch:>6} {str(widths):<20} {t_py * 1e6:>10.1f} {'-':>10} {'-':>8}")
            continue
        t_c, a_c = time_backend(_ckernels, Ws, bs, X, G, args.repeat)
        gap = max(float(np.max(np.abs(p - c))) for p, c in zip(a_py, a_c))
        if gap > 1e-12:
            raise SystemExit(f"backends disagree by {gap:g} on {widths}")
        print(f"{batch:>6} {str(widths):<20} {t_py * 1e6:>10.1f} {t_c * 1e6:>10.1f} {t_py / t_c:>7.2f}x")


if __name__ == "__main__":
    main()
