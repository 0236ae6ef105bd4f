"""Classify Jacobi operators with b_n = n^alpha over a grid of exponents.

Usage: python scripts/carleman_sweep.py --alphas 0.5 1 1.5 2 3 --out results/carleman.csv
"""
import argparse
import csv
import sys
import time

from offdiag.criteria import ClassifyConfig, classify
from offdiag.jacobi import JacobiSpec, compile_jacobi


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.5, 1.0, 1.5, 2.0, 3.0])
    ap.add_argument("--horizons", type=int, nargs=2, default=[10_000, 20_000])
    ap.add_argument("--out", help="CSV path; stdout when omitted")
    args = ap.parse_args(argv)

    cfg = ClassifyConfig(defect_horizons=tuple(args.horizons))
    rows = []
    for alpha in args.alphas:
        op = compile_jacobi(JacobiSpec("0", f"n^{alpha}"))
        t0 = time.perf_counter()
        res = classify(op, config=cfg)
        est = res.deficiency
        rows.append({"alpha": alpha, "verdict": res.verdict, "provenance": res.provenance,
                     "n_plus": est.n_plus, "n_minus": est.n_minus,
                     "confidence": est.confidence, "seconds": round(time.perf_counter() - t0, 2)})

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
