"""Verdict engine: sufficient tests for essential selfadjointness, the
converse certificate, the positive-operator test and the commuting-family
(Nelson) gate, orchestrated by ``classify``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .defect import (DEFAULT_RULE, DefectSolution, DeficiencyEstimate, TailRule,
                     certify_in_domain, estimate_deficiency_indices, solve_family)
from .diagnostics import (NotDefectVector, _coeffs, detect_smoothness_shift, local_seq,
                          offdiag_norm_seq, quad_seq, smooth_ladder)
from .graded import (GradedOperator, GradedVector, ProjectionLadder, ProductOperator,
                     SumOperator, basis, geometric_probe, graded_basis_size, truncate,
                     unit_ladder)
from .jacobi import JacobiOperator, JacobiSpec, jacobi_from_operator
from .series import SeriesVerdict, _fit, reciprocal_series, series_test

log = logging.getLogger(__name__)


@dataclass
class Evidence:
    criterion: str
    outcome: str                 # ESA | NotESA | Inconclusive | Candidate | Skipped
    detail: Dict[str, Any] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"criterion": self.criterion, "outcome": self.outcome, "detail": self.detail}


@dataclass
class CriterionVerdict:
    verdict: str                 # ESA | NotESA | Inconclusive
    provenance: str
    evidence: List[Evidence] = field(default_factory=list)
    deficiency: Optional[DeficiencyEstimate] = None
    certificate: Optional["Certificate"] = None
    leaning: str = ""

    def summary(self) -> dict:
        out = {"verdict": self.verdict, "provenance": self.provenance, "leaning": self.leaning,
               "evidence": [e.summary() for e in self.evidence]}
        if self.deficiency is not None:
            out["deficiency"] = self.deficiency.summary()
        if self.certificate is not None:
            out["certificate"] = self.certificate.summary()
        return out


# --------------------------------------------------------------- Carleman


def _split_blocks(spec: JacobiSpec, horizon: int):
    b = spec.b_values(horizon)
    zeros = np.flatnonzero(b == 0)
    start = int(zeros[-1]) + 1 if zeros.size else 0
    return b[start:], [int(z) + 1 for z in zeros]


@dataclass
class CarlemanResult:
    series: SeriesVerdict
    implication: str             # ESA | Candidate | Inconclusive
    zero_couplings: List[int]

    def summary(self) -> dict:
        return {"series": self.series.summary(), "implication": self.implication,
                "zero_couplings": self.zero_couplings[:20]}


def carleman_test(spec: JacobiSpec, horizon: int = 10 ** 6) -> CarlemanResult:
    """sum 1/|b_n| on the last (possibly infinite) direct summand."""
    tail_b, zeros = _split_blocks(spec, horizon)
    if tail_b.size < 20:
        sv = series_test(np.ones(0))
        return CarlemanResult(sv, "Inconclusive", zeros)
    sv = reciprocal_series(tail_b)
    impl = {"Divergent": "ESA", "Convergent": "Candidate"}.get(sv.kind, "Inconclusive")
    return CarlemanResult(sv, impl, zeros)


# ------------------------------------------------------------ b_j tests


def bounded_norm_test(b_seq: Sequence[float]) -> Evidence:
    """ESA when the off-diagonal norms stay bounded over the horizon.

    Bounded means: the maximum is reached in the first half, or the final
    decade shows no growth (log-log slope <= 0.01).
    """
    b = np.asarray(b_seq, dtype=float)
    J = b.size
    if J < 10:
        return Evidence("bounded_norms", "Inconclusive", {"reason": "too few levels"})
    top = float(b.max())
    arg = int(np.argmax(b)) + 1
    tail = b[J // 10:]
    levels = np.arange(J // 10 + 1, J + 1)
    slope = math.nan
    if np.all(tail > 0):
        slope, _ = _fit(np.log(levels), np.log(tail))
    early = arg <= J // 2
    flat = (not math.isnan(slope)) and slope <= 0.01
    if top == 0.0 or early or flat:
        return Evidence("bounded_norms", "ESA", {"max": top, "argmax": arg, "tail_slope": slope})
    return Evidence("bounded_norms", "Inconclusive",
                    {"max": top, "argmax": arg, "tail_slope": slope, "reason": "norms still growing"})


def contrapositive_tests(b_seq: Sequence[float], c_seqs: Sequence[Sequence[float]], shift: int,
                         c_candidates_cover_space: bool = False) -> List[Evidence]:
    """Divergent sum => no defect vector => ESA, branch by branch.

    Branches in order: c_j (per candidate vector), 1/b_j^2, 1/b_j. All need
    shift-1 smoothness. The c_j branch is decisive only when the candidates
    span every formal solution the solver could return.
    """
    out: List[Evidence] = []
    if shift != 1:
        reason = f"smoothness shift {shift} != 1"
        for name in ("local_c", "sum_inv_b2", "sum_inv_b"):
            out.append(Evidence(name, "Skipped", {"reason": reason}))
        return out
    if c_seqs:
        verdicts = [reciprocal_series(c) for c in c_seqs]
        all_div = all(v.kind == "Divergent" for v in verdicts)
        outcome = "ESA" if all_div and c_candidates_cover_space else "Inconclusive"
        out.append(Evidence("local_c", outcome, {"series": [v.summary() for v in verdicts],
                                                 "covers_solution_space": c_candidates_cover_space}))
    else:
        out.append(Evidence("local_c", "Skipped", {"reason": "no candidate defect vectors"}))
    b = np.asarray(b_seq, dtype=float)
    for name, power in (("sum_inv_b2", 2.0), ("sum_inv_b", 1.0)):
        sv = reciprocal_series(b, power)
        out.append(Evidence(name, "ESA" if sv.kind == "Divergent" else "Inconclusive",
                            {"series": sv.summary()}))
    return out


# ------------------------------------------------------------- certificate


class NotInDomain(ValueError):
    pass


@dataclass
class Certificate:
    """x lies in D(S*) and sum 1/c_n(x) < inf, so x is outside D(closure S)."""

    vector_label: str
    series: SeriesVerdict
    sum_value: float
    domain_profile: Dict[int, float]

    def summary(self) -> dict:
        return {"vector": self.vector_label, "sum": self.sum_value,
                "series": self.series.summary(),
                "domain_profile": {str(k): v for k, v in sorted(self.domain_profile.items())}}


def converse_certificate(op: GradedOperator, ladder: ProjectionLadder, sol: DefectSolution,
                         J: Optional[int] = None) -> Optional[Certificate]:
    """Certificate that the closure misses ``sol.vector`` (None if the sum diverges)."""
    x = sol.vector
    if x is None:
        raise NotInDomain("no vector")
    if x.rule is None and x.max_degree < x.horizon - 1 - op.band_order:
        raise NotInDomain("finitely supported vector: c_n(x) vanishes eventually, "
                          "so 1/c_n(x) is undefined; such x lie in the domain already")
    if detect_smoothness_shift(op, ladder) != 1:
        raise ValueError("converse certificate needs shift-1 smoothness")
    ok, profile = certify_in_domain(op, sol)
    if not ok:
        raise NotInDomain("formal image S* x is not certified l2 within the horizon")
    if J is None:
        J = _levels_within(ladder, x.horizon - op.band_order)
    c = local_seq(op, ladder, x, J)
    sv = reciprocal_series(c)
    if sv.kind != "Convergent":
        return None
    return Certificate(x.label, sv, sv.limit_estimate, profile)


def _levels_within(ladder: ProjectionLadder, top: int) -> int:
    J = 1
    while ladder.cutoff(J + 1) <= top:
        J += 1
    return J


# -------------------------------------------------------------- positivity


@dataclass
class PositivityReport:
    positive: bool
    min_eigs: Dict[int, float]
    witness: Optional[np.ndarray] = None
    witness_size: Optional[int] = None

    def summary(self) -> dict:
        return {"positive": self.positive,
                "min_eigs": {str(k): v for k, v in sorted(self.min_eigs.items())},
                "witness_size": self.witness_size}


def positivity_check(op: GradedOperator, schedule: Sequence[int] = (4, 8, 16, 32, 64),
                     tol: float = 1e-9, max_dim: int = 2500) -> PositivityReport:
    """Smallest eigenvalue of truncations; a negative one is a witness."""
    if not op.hermitian:
        raise ValueError("positivity needs a symmetric operator")
    mins: Dict[int, float] = {}
    for D in schedule:
        if graded_basis_size(op.k, D) > max_dim:
            break
        T = truncate(op, D)
        w, v = np.linalg.eigh((T + T.conj().T) / 2)
        mins[D] = float(w[0])
        if w[0] < -tol * max(1.0, abs(w).max()):
            return PositivityReport(False, mins, v[:, 0], D)
    return PositivityReport(True, mins)


@dataclass
class PositiveDefectResult:
    outcome: str                     # ESA | NotESA | Inconclusive
    l2_counts: Dict[int, int]
    sums: List[Dict[str, Any]]

    def summary(self) -> dict:
        return {"outcome": self.outcome, "l2_counts": {str(k): v for k, v in self.l2_counts.items()},
                "sums": self.sums}


def positive_defect_test(op: GradedOperator, ladder: ProjectionLadder,
                         horizons: Sequence[int] = (4000, 8000),
                         rule: TailRule = DEFAULT_RULE) -> PositiveDefectResult:
    """Solve L* x = -x. No l2 solution at either horizon means ESA.

    For l2 solutions the two summability consequences are evaluated:
    sum 1/d_n(x) and sum c_n(x)^(-1/2), both expected Convergent.
    """
    if op.positive is not True:
        raise ValueError("positive_defect_test needs an operator flagged positive")
    fams = [solve_family(op, -1.0, N, rule) for N in sorted(horizons)]
    counts = {f.horizon: f.count("L2") for f in fams}
    undecided = any(f.count("Undecided") or f.null_directions for f in fams)
    sums = []
    final = fams[-1]
    smooth = smooth_ladder(op, ladder)
    for sol in final.l2():
        J = _levels_within(smooth, sol.vector.horizon - op.band_order)
        d = quad_seq(op, smooth, sol.vector, J)
        c = local_seq(op, smooth, sol.vector, J)
        sums.append({"sum_inv_d": reciprocal_series(d).summary(),
                     "sum_inv_sqrt_c": reciprocal_series(c, 0.5).summary()})
    if undecided:
        outcome = "Inconclusive"
    elif all(v == 0 for v in counts.values()):
        outcome = "ESA"
    elif len(set(counts.values())) == 1:
        outcome = "NotESA"
    else:
        outcome = "Inconclusive"
    return PositiveDefectResult(outcome, counts, sums)


# ------------------------------------------------------------------ Nelson


@dataclass
class GrowthFit:
    slope: float
    r2: float
    passes: bool

    def summary(self) -> dict:
        return {"slope": self.slope, "r2": self.r2, "passes": self.passes}


def growth_fit(values: np.ndarray, levels: np.ndarray, max_slope: float = 1.1,
               min_r2: float = 0.98) -> GrowthFit:
    """log-log fit over the last decade of levels."""
    lo = max(1, levels[-1] // 10)
    sel = (levels >= lo) & (values > 0)
    if sel.sum() < 3:
        return GrowthFit(math.nan, math.nan, False)
    slope, r2 = _fit(np.log(levels[sel].astype(float)), np.log(values[sel]))
    return GrowthFit(slope, r2, slope <= max_slope and r2 >= min_r2)


@dataclass
class NelsonVerdict:
    verdict: str                         # JointESA | Inconclusive | Refused
    commutator_residual: float
    witness: Optional[tuple] = None
    envelope_fits: List[GrowthFit] = field(default_factory=list)
    probe_fits: Dict[str, List[GrowthFit]] = field(default_factory=dict)
    chain_ok: Optional[bool] = None
    chain_worst: float = 0.0
    reason: str = ""

    def summary(self) -> dict:
        return {"verdict": self.verdict, "commutator_residual": self.commutator_residual,
                "witness": list(self.witness) if self.witness else None,
                "envelope_fits": [f.summary() for f in self.envelope_fits],
                "probe_fits": {k: [f.summary() for f in v] for k, v in self.probe_fits.items()},
                "chain_ok": self.chain_ok, "chain_worst": self.chain_worst, "reason": self.reason}


def commutator_residual(a: GradedOperator, b: GradedOperator, D: int):
    """max over basis states e with |e| <= D of ||(AB - BA) e||, and the witness."""
    n = D + 1
    ab = a.columns(n + b.band_order) @ b.columns(n)
    ba = b.columns(n + a.band_order) @ a.columns(n)
    rows = max(ab.shape[0], ba.shape[0])
    ab.resize((rows, ab.shape[1]))
    ba.resize((rows, ba.shape[1]))
    diff = (ab - ba).toarray()
    norms = np.linalg.norm(diff, axis=0)
    i = int(np.argmax(norms))
    return float(norms[i]), tuple(int(v) for v in basis(a.k, n).states[i])


def nelson_verdict(ops: Sequence[GradedOperator], probes: Sequence[GradedVector] = (),
                   levels: int = 40, D: int = 10, seed: int = 0) -> NelsonVerdict:
    """Commuting symmetric family with O(n) off-diagonal growth.

    Gate: exact commutators vanish on degrees <= D, and the per-operator
    envelope b_{i,n}^2 = sup_{||x|| = 1} c_i(n, x) fits a log-log slope
    <= 1.1 with R^2 >= 0.98 over the last decade of levels. Probe fits are
    recorded and must not exceed the slope bound.
    """
    if any(not o.hermitian for o in ops):
        return NelsonVerdict("Refused", math.nan, reason="non-symmetric member")
    k = ops[0].k
    worst, witness = 0.0, None
    for i in range(len(ops)):
        for j in range(i + 1, len(ops)):
            r, w = commutator_residual(ops[i], ops[j], D)
            if r > worst:
                worst, witness = r, w
    if worst > 1e-12:
        return NelsonVerdict("Refused", worst, witness,
                             reason=f"members do not commute on degree <= {D}")
    shift = max(detect_smoothness_shift(o, unit_ladder()) for o in ops)
    ladder = unit_ladder().coarsen(max(shift, 1))
    lv = np.arange(1, levels + 1)
    env = [growth_fit(offdiag_norm_seq(o, ladder, levels, seed) ** 2, lv) for o in ops]
    probes = list(probes) or [geometric_probe(k, ladder.cutoff(levels + 2) + 4)]
    pfits: Dict[str, List[GrowthFit]] = {}
    chain_ok, chain_worst = True, 0.0
    squares = [ProductOperator(o, o) for o in ops]
    L = SumOperator(squares, [1.0] * len(squares))
    L.hermitian, L.positive = True, True
    for idx, x in enumerate(probes):
        cs = [local_seq(o, ladder, x, levels + 1) for o in ops]
        pfits[x.label or f"probe{idx}"] = [growth_fit(c[:levels], lv, 1.1, -math.inf) for c in cs]
        d = quad_seq(L, unit_ladder(), x, levels) if shift == 1 else None
        if d is not None:
            csum = np.sum(cs, axis=0)
            bound = np.sqrt(csum[:levels] * csum[1:levels + 1])
            excess = d - bound
            chain_worst = float(excess.max())
            chain_ok = chain_ok and bool(np.all(excess <= 1e-9 * np.maximum(bound, 1.0)))
    ok = all(f.passes for f in env) and all(f.passes for fs in pfits.values() for f in fs)
    return NelsonVerdict("JointESA" if ok and chain_ok else "Inconclusive", worst, witness, env,
                         pfits, chain_ok, chain_worst,
                         "" if ok else "growth gate not met (criterion is sufficient only)")


# ---------------------------------------------------------------- classify


@dataclass
class ClassifyConfig:
    defect_horizons: Optional[Sequence[int]] = None   # default by operator type
    series_horizon: int = 10 ** 6
    max_levels: int = 2000
    seed: int = 0
    rule: TailRule = DEFAULT_RULE
    positivity_schedule: Sequence[int] = (4, 8, 16, 32, 64)
    workers: int = 1

    def horizons_for(self, op: GradedOperator) -> List[int]:
        if self.defect_horizons:
            return sorted(int(h) for h in self.defect_horizons)
        return [10_000, 20_000] if op.band_order <= 1 else [4000, 8000]


def _jacobi_spec(op: GradedOperator, n: int) -> JacobiSpec:
    return op.spec if isinstance(op, JacobiOperator) else jacobi_from_operator(op, n)


def _reconcile(verdict: str, provenance: str, est: Optional[DeficiencyEstimate],
               evidence: List[Evidence]) -> tuple:
    if est is None:
        return verdict, provenance, ""
    if verdict == "ESA" and est.stable_nonzero:
        evidence.append(Evidence("consistency", "Inconclusive",
                                 {"reason": f"{provenance} says ESA but the deficiency estimate is "
                                            f"({est.n_plus},{est.n_minus}) Stable"}))
        return "Inconclusive", "conflict", ""
    if verdict == "NotESA" and est.stable_zero:
        evidence.append(Evidence("consistency", "Inconclusive",
                                 {"reason": f"{provenance} says NotESA but the deficiency estimate "
                                            "is (0,0) Stable"}))
        return "Inconclusive", "conflict", ""
    return verdict, provenance, ""


def classify(op: GradedOperator, ladder: Optional[ProjectionLadder] = None,
             config: Optional[ClassifyConfig] = None) -> CriterionVerdict:
    """Run the tests in strength order; the first decisive one sets the verdict.

    Order: Carleman (tridiagonal) -> positive-operator test -> contrapositive
    series tests (c_j first, then 1/b_j^2, 1/b_j, bounded norms) -> converse
    certificate -> deficiency estimate. The deficiency estimate is always
    computed and any conflict with it downgrades the verdict.
    """
    if not op.hermitian:
        raise ValueError("classify needs a symmetric operator")
    cfg = config or ClassifyConfig()
    ladder = ladder or unit_ladder()
    horizons = cfg.horizons_for(op)
    evidence: List[Evidence] = []

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        est_future = pool.submit(estimate_deficiency_indices, op, horizons, cfg.rule)
        pos_future = pool.submit(positivity_check, op, cfg.positivity_schedule)
        est = est_future.result()
        pos = pos_future.result()
    evidence.append(Evidence("deficiency_estimate",
                             "NotESA" if est.stable_nonzero else
                             ("ESA" if est.stable_zero else "Inconclusive"),
                             {"n_plus": est.n_plus, "n_minus": est.n_minus,
                              "confidence": est.confidence, "reasons": est.reasons}))
    decided: Optional[tuple] = None
    certificate = None

    # 1. diagonal and tridiagonal operators
    if op.k == 1 and op.band_order == 0:
        decided = ("ESA", "bounded_norms")
        evidence.append(Evidence("bounded_norms", "ESA", {"reason": "diagonal operator: b_j = 0"}))
    elif op.k == 1 and op.band_order == 1:
        car = carleman_test(_jacobi_spec(op, cfg.series_horizon), cfg.series_horizon)
        evidence.append(Evidence("carleman", car.implication, car.summary()))
        if car.implication == "ESA":
            decided = ("ESA", "carleman")

    # 2. positive operators
    if op.positive is None:
        op = op.flagged(positive=pos.positive)
    evidence.append(Evidence("positivity", "Candidate" if pos.positive else "Skipped", pos.summary()))
    if decided is None and op.positive:
        pdt = positive_defect_test(op, ladder, horizons, cfg.rule)
        evidence.append(Evidence("positive_defect", pdt.outcome, pdt.summary()))
        if pdt.outcome == "ESA":
            decided = ("ESA", "positive_defect")

    # 3. contrapositive series tests on the shift-1 ladder
    smooth = smooth_ladder(op, ladder)
    shift = detect_smoothness_shift(op, smooth) if op.band_order else 0
    final = {tag: fams[-1] for tag, fams in est.families.items()}
    candidates = [s for f in final.values() for s in f.solutions
                  if s.verdict in ("L2", "Undecided") and s.vector is not None]
    covers = all(f.null_directions == 0 and f.solutions for f in final.values())
    J = min(cfg.max_levels, _levels_within(smooth, horizons[-1] - op.band_order) - 1) \
        if op.band_order else 0
    if decided is None and op.band_order:
        c_seqs = [local_seq(op, smooth, s.vector, J) for s in candidates]
        b_seq = offdiag_norm_seq(op, smooth, J, cfg.seed)
        for ev in contrapositive_tests(b_seq, c_seqs, shift, covers):
            evidence.append(ev)
            if decided is None and ev.outcome == "ESA":
                decided = ("ESA", ev.criterion)
        ev = bounded_norm_test(b_seq)
        evidence.append(ev)
        if decided is None and ev.outcome == "ESA":
            decided = ("ESA", "bounded_norms")

    # 4. converse certificate on l2 candidates
    if decided is None:
        for s in candidates:
            if s.verdict != "L2":
                continue
            try:
                cert = converse_certificate(op, smooth, s)
            except (NotInDomain, ValueError) as exc:
                evidence.append(Evidence("converse_certificate", "Skipped", {"reason": str(exc)}))
                continue
            if cert is not None:
                certificate = cert
                evidence.append(Evidence("converse_certificate", "NotESA", cert.summary()))
                decided = ("NotESA", "converse_certificate")
                break
            evidence.append(Evidence("converse_certificate", "Inconclusive",
                                     {"vector": s.vector.label, "reason": "sum 1/c_n(x) not Convergent"}))

    # 5. deficiency estimate fallback
    leaning = ""
    if decided is None:
        if est.stable_nonzero:
            decided = ("NotESA", "deficiency_estimate")
        else:
            decided = ("Inconclusive", "none")
            if est.stable_zero:
                leaning = "ESA"

    verdict, provenance, _ = _reconcile(decided[0], decided[1], est, evidence)
    log.info("classify %s -> %s (%s)", op.name, verdict, provenance)
    return CriterionVerdict(verdict, provenance, evidence, est, certificate, leaning)
