"""Density error at the lower bid boundary: local polynomial vs naive kernel.

Draws uniform bids on [0, 1] (true density 1) and compares the estimates
at the smallest bid across sample sizes and seeds.
"""

import argparse

import numpy as np

from cmproc.lpe import EvalPoint, LpeSample, default_bandwidths, fit_pdf_point, kernel_density


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[500, 1000, 2000, 5000, 10000])
    p.add_argument("--reps", type=int, default=50)
    a = p.parse_args()
    print(f"{'T':>6} {'LPE mean err':>13} {'LPE p95 err':>12} {'naive mean err':>15}")
    for T in a.sizes:
        e_lpe, e_naive = [], []
        for seed in range(a.reps):
            rng = np.random.default_rng(seed)
            s = LpeSample(rng.uniform(0, 1, T), np.full(T, 5.5), np.full(T, 2.0), np.full(T, 2.0))
            bw = default_bandwidths(s)
            z = EvalPoint(float(s.b.min()), 5.5, 2, 2)
            e_lpe.append(abs(fit_pdf_point(s, z, bw) - 1.0))
            e_naive.append(abs(kernel_density(s.b, z.b, bw.h_g) - 1.0))
        print(f"{T:>6} {np.mean(e_lpe):>13.3f} {np.quantile(e_lpe, 0.95):>12.3f} {np.mean(e_naive):>15.3f}")


if __name__ == "__main__":
    main()
