"""Compare the reciprocal-sum test with the grid iteration on sample sequences.

Prints, for each sequence, the sum verdict, the largest grid start that stays
below 1, and whether the two sides agree.
"""
import argparse

import numpy as np

from offdiag.series import fun3_equivalence

SEQUENCES = {
    "1": lambda j: np.ones_like(j),
    "sqrt(j)": np.sqrt,
    "j": lambda j: j,
    "j^1.5": lambda j: j ** 1.5,
    "50 j^2": lambda j: 50.0 * j ** 2,
    "2^j": lambda j: _power(2.0, j),
}


def _power(r, j):
    with np.errstate(over="ignore"):
        return np.power(r, j)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--horizon", type=int, default=10_000)
    args = ap.parse_args(argv)
    print(f"{'c_j':<10} {'sum side':<12} {'survivor':<10} {'largest xi':<11} agree")
    for label, rule in SEQUENCES.items():
        res = fun3_equivalence(rule, args.horizon)
        top = "-" if res.largest_surviving_xi is None else f"{res.largest_surviving_xi:.2f}"
        print(f"{label:<10} {res.sum_side.kind:<12} {str(res.iter_side):<10} {top:<11} "
              f"{'n/a' if res.vacuous else res.agree}")


if __name__ == "__main__":
    main()
