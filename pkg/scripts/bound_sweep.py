"""Sweep the peak-activation cosine bound over dimension and peak size.

Prints the finite bound, its large-d limit and the scaled gap
(finite - limit) * sqrt(d), which approaches 2|q|sqrt(1-p^2) + |p|sqrt(1-2q^2).
With --verify, also draws random-sign constructions at each d and reports the
largest |cos| seen.
"""

import argparse
import math

from gapkit.activation import (
    PeakBoundInput,
    cosine_upper_bound_finite,
    cosine_upper_bound_limit,
    monte_carlo_bound_check,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--p", type=float, default=-0.5)
    ap.add_argument("--q", type=float, default=1 / 3)
    ap.add_argument("--dims", type=int, nargs="+", default=[64, 512, 4096, 10**5, 10**6, 10**7, 10**8])
    ap.add_argument("--verify", type=int, default=0, metavar="TRIALS")
    args = ap.parse_args()

    limit = cosine_upper_bound_limit(args.p, args.q)
    coef = 2 * abs(args.q) * math.sqrt(1 - args.p**2) + abs(args.p) * math.sqrt(1 - 2 * args.q**2)
    print(f"p={args.p} q={args.q:.6f} limit={limit:.6f} leading coefficient={coef:.6f}")
    print(f"{'d':>10}{'finite':>12}{'finite-limit':>14}{'scaled gap':>12}" + ("   max|cos|" if args.verify else ""))
    for d in args.dims:
        inp = PeakBoundInput(args.p, args.q, d)
        fin = cosine_upper_bound_finite(inp)
        line = f"{d:>10}{fin:12.6f}{fin - limit:14.3e}{(fin - limit) * math.sqrt(d):12.6f}"
        if args.verify and d <= 10**5:
            res = monte_carlo_bound_check(inp, args.verify, seed=d)
            line += f"   {res['max_abs_cos']:.4f} ({res['violations']} violations)"
        print(line)


if __name__ == "__main__":
    main()
