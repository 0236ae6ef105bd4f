"""Classify a list of single-mode polynomial operators and print one line each."""
import argparse
import json
import time

from offdiag.criteria import ClassifyConfig, classify
from offdiag.ncpoly import compile_poly, parse_ncpoly

DEFAULT = ["q", "p*q + q*p", "p^2 + q^4", "p*q*p", "p^2 - q^4", "q^3"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("exprs", nargs="*", default=DEFAULT)
    ap.add_argument("--horizons", type=int, nargs=2, default=[2000, 4000])
    ap.add_argument("--json", action="store_true", help="print full summaries")
    args = ap.parse_args(argv)

    cfg = ClassifyConfig(defect_horizons=tuple(args.horizons))
    for expr in args.exprs:
        op = compile_poly(parse_ncpoly(expr), name=expr)
        t0 = time.perf_counter()
        res = classify(op, config=cfg)
        secs = time.perf_counter() - t0
        if args.json:
            print(json.dumps(res.summary(), default=str, sort_keys=True))
            continue
        est = res.deficiency
        print(f"{expr:<14} {res.verdict:<13} via {res.provenance:<22} "
              f"estimate ({est.n_plus},{est.n_minus}) {est.confidence:<8} {secs:6.1f} s")


if __name__ == "__main__":
    main()
