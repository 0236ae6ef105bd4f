"""Run configuration: JSON text -> validated dataclasses."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .defect import TailRule
from .graded import GradedVector, ProjectionLadder, geometric_probe
from .jacobi import JacobiSpec, SeqExpr, SeqExprError, compile_jacobi
from .ncpoly import NonSymmetric, ParseError, compile_poly, parse_ncpoly


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


TOL_BOUNDS = (1e-15, 1e-2)


@dataclass
class OperatorSpec:
    kind: str                       # jacobi | ncpoly | family
    k: int = 1
    expr: Optional[str] = None
    exprs: List[str] = field(default_factory=list)
    a: Optional[str] = None
    b: Optional[str] = None
    force: bool = False


@dataclass
class Horizons:
    defect: Optional[List[int]] = None
    series: int = 10 ** 6
    levels: int = 2000
    commutator_degree: int = 10
    nelson_levels: int = 40


@dataclass
class Tolerances:
    notl2_mass: float = 1e-3
    strong_mass: float = 1e-8
    positivity: float = 1e-9


@dataclass
class RunConfig:
    operator: OperatorSpec
    ladder_step: int = 1
    ladder_cutoffs: Optional[List[int]] = None
    probes: List[Any] = field(default_factory=lambda: ["geometric"])
    horizons: Horizons = field(default_factory=Horizons)
    tolerances: Tolerances = field(default_factory=Tolerances)
    params: Dict[str, float] = field(default_factory=dict)
    output_dir: Optional[str] = None

    # ---------------------------------------------------------- building
    def ladder(self) -> ProjectionLadder:
        if self.ladder_cutoffs:
            return ProjectionLadder(explicit=tuple(self.ladder_cutoffs))
        return ProjectionLadder(step=self.ladder_step)

    def tail_rule(self) -> TailRule:
        return TailRule(0.9, self.tolerances.notl2_mass, self.tolerances.strong_mass)

    def build_operator(self):
        op = self.operator
        try:
            if op.kind == "jacobi":
                spec = JacobiSpec(SeqExpr(op.a or "0", self.params), SeqExpr(op.b or "1", self.params))
                spec.a_values(64), spec.b_values(64)
                return compile_jacobi(spec, name=f"jacobi(a={op.a}, b={op.b})")
            if op.kind == "ncpoly":
                return compile_poly(parse_ncpoly(op.expr, op.k), force=op.force, name=op.expr)
            return [compile_poly(parse_ncpoly(e, op.k), force=op.force, name=e) for e in op.exprs]
        except (ParseError, NonSymmetric, SeqExprError) as exc:
            field_name = {"jacobi": "operator.b", "ncpoly": "operator.expr",
                          "family": "operator.exprs"}[op.kind]
            raise ConfigError(field_name, str(exc)) from None

    def build_probes(self, horizon: int) -> List[GradedVector]:
        out = []
        for i, p in enumerate(self.probes):
            path = f"probes[{i}]"
            if p == "geometric":
                out.append(geometric_probe(self.operator.k, horizon))
            elif isinstance(p, dict) and "entries" in p:
                entries = {tuple(int(v) for v in alpha): complex(*val) if isinstance(val, list)
                           else complex(val) for alpha, val in p["entries"]}
                v = GradedVector.from_entries(self.operator.k, entries)
                out.append(GradedVector(v.k, v.coeffs, v.horizon, label=p.get("name", path)))
            elif isinstance(p, dict) and "rule" in p:
                if self.operator.k != 1:
                    raise ConfigError(path, "rule probes are defined on k = 1 only")
                expr = SeqExpr(p["rule"], self.params)

                def rule(states, expr=expr):
                    return expr(states[:, 0] + 1.0)

                v = GradedVector.from_rule(1, rule, horizon, label=p.get("name", path))
                nrm = v.norm()
                out.append(GradedVector(1, v.coeffs / nrm, horizon, rule=lambda s, r=rule, c=nrm: r(s) / c,
                                        label=v.label, tail_bound=math.nan))
            else:
                raise ConfigError(path, "probe must be 'geometric', {entries: ...} or {rule: ...}")
        return out

    def echo(self) -> Dict[str, Any]:
        d = asdict(self)
        d.pop("output_dir", None)
        return d


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ConfigError(path, message)


def _pos_int(v, path: str) -> int:
    _require(isinstance(v, int) and not isinstance(v, bool) and v > 0, path, "must be a positive integer")
    return int(v)


def parse_config(data: Dict[str, Any]) -> RunConfig:
    _require(isinstance(data, dict), "$", "config must be a JSON object")
    known = {"operator", "ladder", "probes", "horizons", "tolerances", "params", "output"}
    extra = set(data) - known
    _require(not extra, "$", f"unknown keys {sorted(extra)}")
    _require("operator" in data, "operator", "missing")
    o = data["operator"]
    _require(isinstance(o, dict), "operator", "must be an object")
    kind = o.get("kind")
    _require(kind in ("jacobi", "ncpoly", "family"), "operator.kind",
             "must be exactly one of jacobi | ncpoly | family")
    k = o.get("k", 1)
    _require(isinstance(k, int) and k >= 1, "operator.k", "must be an integer >= 1")
    if kind == "jacobi":
        _require(k == 1, "operator.k", "Jacobi operators have k = 1")
        _require(isinstance(o.get("b", "1"), str), "operator.b", "must be a string")
        _require(isinstance(o.get("a", "0"), str), "operator.a", "must be a string")
        _require("expr" not in o and "exprs" not in o, "operator", "jacobi takes a and b only")
        op = OperatorSpec("jacobi", 1, a=o.get("a", "0"), b=o.get("b", "1"))
    elif kind == "ncpoly":
        _require(isinstance(o.get("expr"), str), "operator.expr", "must be a string")
        op = OperatorSpec("ncpoly", k, expr=o["expr"], force=bool(o.get("force", False)))
    else:
        ex = o.get("exprs")
        _require(isinstance(ex, list) and ex and all(isinstance(e, str) for e in ex),
                 "operator.exprs", "must be a non-empty list of strings")
        op = OperatorSpec("family", k, exprs=list(ex))

    cfg = RunConfig(op)
    lad = data.get("ladder", {})
    _require(isinstance(lad, dict), "ladder", "must be an object")
    if "cutoffs" in lad:
        c = lad["cutoffs"]
        _require(isinstance(c, list) and c and all(isinstance(v, int) for v in c)
                 and c[0] >= 1 and all(b > a for a, b in zip(c, c[1:])),
                 "ladder.cutoffs", "must be strictly increasing positive integers")
        cfg.ladder_cutoffs = list(c)
    if "step" in lad:
        cfg.ladder_step = _pos_int(lad["step"], "ladder.step")

    if "probes" in data:
        _require(isinstance(data["probes"], list), "probes", "must be a list")
        cfg.probes = list(data["probes"])

    h = data.get("horizons", {})
    _require(isinstance(h, dict), "horizons", "must be an object")
    if "defect" in h:
        d = h["defect"]
        _require(isinstance(d, list) and len(d) >= 2, "horizons.defect", "needs at least two horizons")
        cfg.horizons.defect = [_pos_int(v, f"horizons.defect[{i}]") for i, v in enumerate(d)]
        _require(min(cfg.horizons.defect) >= 64, "horizons.defect", "horizons must be >= 64")
    for key in ("series", "levels", "commutator_degree", "nelson_levels"):
        if key in h:
            setattr(cfg.horizons, key, _pos_int(h[key], f"horizons.{key}"))

    t = data.get("tolerances", {})
    _require(isinstance(t, dict), "tolerances", "must be an object")
    for key, val in t.items():
        path = f"tolerances.{key}"
        _require(hasattr(cfg.tolerances, key), path, "unknown tolerance")
        _require(isinstance(val, (int, float)) and TOL_BOUNDS[0] <= val <= TOL_BOUNDS[1], path,
                 f"must lie in [{TOL_BOUNDS[0]}, {TOL_BOUNDS[1]}]")
        setattr(cfg.tolerances, key, float(val))

    p = data.get("params", {})
    _require(isinstance(p, dict) and all(isinstance(v, (int, float)) for v in p.values()),
             "params", "must map names to numbers")
    cfg.params = {str(k_): float(v) for k_, v in p.items()}
    out = data.get("output", {})
    _require(isinstance(out, dict), "output", "must be an object")
    cfg.output_dir = out.get("dir")
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("$", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(data)
