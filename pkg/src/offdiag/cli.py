"""Command line: ``offdiag analyze | sweep | selftest``.

Exit codes: 0 on a completed run (whatever the verdict), 1 for bad input,
2 when an internal invariant check fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, parse_config
from .criteria import ClassifyConfig, classify, nelson_verdict
from .diagnostics import InvariantViolation, build_report, smooth_ladder
from .graded import graded_basis_size
from .jacobi import SeqExprError

log = logging.getLogger("offdiag")

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
# sequence tables stop once the level basis would exceed this many states
TABLE_BASIS_LIMIT = 200_000


def jsonable(obj: Any) -> Any:
    """Plain JSON types; non-finite floats become the strings nan / inf / -inf."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isfinite(f):
            return f
        return "nan" if math.isnan(f) else ("inf" if f > 0 else "-inf")
    if isinstance(obj, complex):
        return [jsonable(obj.real), jsonable(obj.imag)]
    return obj


def dump_json(obj: Any) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _table_levels(op, ladder, wanted: int) -> int:
    J = 1
    while J < wanted and graded_basis_size(op.k, ladder.cutoff(J + 1) + op.band_order) <= TABLE_BASIS_LIMIT:
        J += 1
    return J


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_analysis(cfg: RunConfig, out: Optional[Path], seed: int = 0,
                 workers: int = 1) -> Tuple[Dict[str, Any], Dict[str, float]]:
    """Run one configuration; returns (report, timing) and writes files to ``out``."""
    timing: Dict[str, float] = {}
    t0 = time.perf_counter()
    built = cfg.build_operator()
    timing["compile"] = time.perf_counter() - t0
    ladder = cfg.ladder()
    report: Dict[str, Any] = {"tool": {"name": "offdiag", "version": __version__},
                              "seed": seed, "config": cfg.echo()}
    files: Dict[str, str] = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if isinstance(built, list):
        t0 = time.perf_counter()
        k = built[0].k
        probes = cfg.build_probes(ladder.cutoff(cfg.horizons.nelson_levels + 2) + 4)
        nv = nelson_verdict(built, probes, cfg.horizons.nelson_levels,
                            cfg.horizons.commutator_degree, seed)
        timing["nelson"] = time.perf_counter() - t0
        report["operator"] = {"kind": "family", "k": k, "members": [o.name for o in built],
                              "band_orders": [o.band_order for o in built]}
        report["verdict"] = nv.verdict
        report["nelson"] = nv.summary()
        report["files"] = files
        return report, timing

    op = built
    t0 = time.perf_counter()
    cc = ClassifyConfig(defect_horizons=cfg.horizons.defect, series_horizon=cfg.horizons.series,
                        max_levels=cfg.horizons.levels, seed=seed, rule=cfg.tail_rule(),
                        positivity_schedule=(4, 8, 16, 32, 64), workers=workers)
    verdict = classify(op, ladder, cc)
    timing["classify"] = time.perf_counter() - t0
    report["operator"] = {"kind": cfg.operator.kind, "name": op.name, "k": op.k,
                          "band_order": op.band_order, "hermitian": op.hermitian}
    report["verdict"] = verdict.verdict
    report["classification"] = verdict.summary()

    t0 = time.perf_counter()
    smooth = smooth_ladder(op, ladder)
    if verdict.deficiency is not None:
        positive = next((e.outcome == "Candidate" for e in verdict.evidence
                         if e.criterion == "positivity"), None)
        if op.positive is None and positive is not None:
            op = op.flagged(positive=positive)
    J = _table_levels(op, smooth, cfg.horizons.levels)
    probes = cfg.build_probes(smooth.cutoff(J) + op.band_order + 1)
    tables = []
    for i, x in enumerate(probes):
        rep = build_report(op, smooth, J, x, residual=0.0, seed=seed, probe_id=x.label or f"probe{i}")
        name = f"sequences_{i}.csv"
        tables.append({"file": name, "probe": rep.probe_id, "levels": J})
        if out is not None:
            (out / name).write_text(rep.to_csv(), encoding="utf-8")
    report["sequences"] = tables

    defects = []
    if verdict.deficiency is not None:
        for tag, fams in sorted(verdict.deficiency.families.items()):
            for i, s in enumerate(fams[-1].solutions):
                if s.vector is None:
                    continue
                name = f"defect_{'plus' if tag == '+i' else 'minus'}_{i}.csv"
                defects.append({"file": name, "z": tag, "verdict": s.verdict})
                if out is not None:
                    _write_csv(out / name, ["index", "re", "im", "tail_mass"], s.to_rows())
    report["defect_tables"] = defects
    timing["tables"] = time.perf_counter() - t0
    return report, timing


def _write_outputs(out: Path, report: Dict[str, Any], timing: Dict[str, float]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dump_json(report), encoding="utf-8")
    (out / "timing.json").write_text(dump_json(timing), encoding="utf-8")


# -------------------------------------------------------------------- sweep


def parse_grid(text: str) -> Tuple[str, List[float]]:
    """``alpha=0.5:3.0:0.25`` -> ("alpha", [0.5, 0.75, ..., 3.0]) with the stop included."""
    try:
        name, rng = text.split("=", 1)
        start, stop, step = (float(v) for v in rng.split(":"))
    except ValueError:
        raise ConfigError("--grid", f"expected name=start:stop:step, got {text!r}") from None
    if not name.isidentifier() or name == "n":
        raise ConfigError("--grid", f"invalid parameter name {name!r}")
    if step <= 0 or stop < start:
        raise ConfigError("--grid", "need step > 0 and stop >= start")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return name, [round(start + i * step, 12) for i in range(count)]


def _sweep_point(args) -> Dict[str, Any]:
    data, name, value, seed, out = args
    row: Dict[str, Any] = {"param": name, "value": value}
    try:
        d = json.loads(json.dumps(data))
        d.setdefault("params", {})[name] = value
        cfg = parse_config(d)
        report, _ = run_analysis(cfg, Path(out) if out else None, seed, 1)
        cls = report.get("classification", {})
        est = cls.get("deficiency") or {}
        car = next((e for e in cls.get("evidence", []) if e["criterion"] == "carleman"), None)
        row.update(verdict=report["verdict"], provenance=cls.get("provenance", ""),
                   carleman=car["outcome"] if car else "",
                   n_plus=est.get("n_plus", ""), n_minus=est.get("n_minus", ""),
                   confidence=est.get("confidence", ""))
        if est.get("confidence") == "Stable" and report["verdict"] in ("ESA", "NotESA"):
            zero = est.get("n_plus") == 0 and est.get("n_minus") == 0
            row["agreement"] = "yes" if (report["verdict"] == "ESA") == zero else "no"
        else:
            row["agreement"] = ""
        row["error"] = ""
        if out:
            _write_outputs(Path(out), report, {})
    except (ConfigError, SeqExprError, ValueError, ArithmeticError) as exc:
        row.update(verdict="Error", provenance="", carleman="", n_plus="", n_minus="",
                   confidence="", agreement="", error=str(exc))
    return row


SWEEP_COLUMNS = ["param", "value", "verdict", "provenance", "carleman", "n_plus", "n_minus",
                 "confidence", "agreement", "error"]


def run_sweep(data: Dict[str, Any], grid: str, out: Optional[Path], seed: int = 0,
              workers: int = 1) -> List[Dict[str, Any]]:
    name, values = parse_grid(grid)
    parse_config(data)                     # validate once before forking
    jobs = [(data, name, v, seed, str(out / f"point_{i:03d}") if out else None)
            for i, v in enumerate(values)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))     # map keeps grid order
    else:
        rows = [_sweep_point(j) for j in jobs]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "summary.csv", SWEEP_COLUMNS,
                   [[jsonable(r.get(c, "")) for c in SWEEP_COLUMNS] for r in rows])
    return rows


# --------------------------------------------------------------------- main


def _selftest() -> int:
    root = Path(__file__).resolve().parents[2]
    target = root / "tests" / "test_acceptance.py"
    if not target.exists():
        print(f"acceptance tests not found at {target}", file=sys.stderr)
        return EXIT_INPUT
    import pytest  # test extra

    return EXIT_OK if pytest.main(["-q", str(target)]) == 0 else EXIT_INPUT


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="offdiag", description="Essential self-adjointness "
                                 "diagnostics for banded operators on graded bases.")
    ap.add_argument("--version", action="version", version=f"offdiag {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    a = sub.add_parser("analyze", help="classify one operator or family")
    a.add_argument("--config", required=True)
    a.add_argument("--out", default=None)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--workers", type=int, default=default_workers())
    s = sub.add_parser("sweep", help="analyze over a one-parameter grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, help="name=start:stop:step")
    s.add_argument("--out", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=default_workers())
    sub.add_parser("selftest", help="run the acceptance suite")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = LOG_LEVELS.get(os.environ.get("OFFDIAG_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            return _selftest()
        cfg = load_config(args.config)
        out = Path(args.out) if args.out else (Path(cfg.output_dir) if cfg.output_dir else None)
        if args.command == "analyze":
            report, timing = run_analysis(cfg, out, args.seed, args.workers)
            if out is not None:
                _write_outputs(out, report, timing)
            print(json.dumps({"verdict": report["verdict"],
                              "provenance": report.get("classification", {}).get("provenance",
                                                                                 "nelson")}))
        else:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
            rows = run_sweep(data, args.grid, out, args.seed, args.workers)
            for r in rows:
                print(f"{r['param']}={r['value']}: {r['verdict']} {r['error']}".rstrip())
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
