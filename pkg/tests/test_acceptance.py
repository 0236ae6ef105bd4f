"""Acceptance suite: one test per criterion, each reporting every failing case."""
import json
import time

import numpy as np
import pytest

from offdiag import cli
from offdiag.criteria import (ClassifyConfig, classify, growth_fit, nelson_verdict,
                              positivity_check)
from offdiag.defect import solve_family
from offdiag.diagnostics import (check_basic_estimate, check_growth_chain, local_seq,
                                 offdiag_norm_seq, quad_seq, smooth_ladder, xi_seq)
from offdiag.graded import GradedVector, ProductOperator, geometric_probe, truncate, unit_ladder
from offdiag.jacobi import JacobiSpec, compile_jacobi
from offdiag.ncpoly import compile_poly, generator_operator, parse_ncpoly
from offdiag.series import XI_GRID, fun3_equivalence, iterate_chain

JACOBI_HORIZONS = (10_000, 20_000)
POLY_HORIZONS = (2000, 4000)
REL = 1e-8


def _poly(text, k=1):
    return compile_poly(parse_ncpoly(text, k), name=text)


def _jacobi(a, b):
    return compile_jacobi(JacobiSpec(a, b), name=f"jacobi(a={a}, b={b})")


def _square(op):
    L = ProductOperator(op, op)
    L.hermitian, L.positive, L.name = True, True, f"({op.name})^2"
    return L


SUITE = {
    "b=n^0.5": (lambda: _jacobi("0", "n^0.5"), JACOBI_HORIZONS),
    "b=n^1.0": (lambda: _jacobi("0", "n^1.0"), JACOBI_HORIZONS),
    "b=n^2.0": (lambda: _jacobi("0", "n^2.0"), JACOBI_HORIZONS),
    "b=n^3.0": (lambda: _jacobi("0", "n^3.0"), JACOBI_HORIZONS),
    "b=1": (lambda: _jacobi("0", "1"), JACOBI_HORIZONS),
    "a=n^4,b=n^2": (lambda: _jacobi("n^4", "n^2"), JACOBI_HORIZONS),
    "q": (lambda: _poly("q"), JACOBI_HORIZONS),
    "pqp": (lambda: _poly("p*q*p"), POLY_HORIZONS),
    "p^2-q^4": (lambda: _poly("p^2 - q^4"), POLY_HORIZONS),
    "p^2+q^4": (lambda: _poly("p^2 + q^4"), POLY_HORIZONS),
    "pq+qp": (lambda: _poly("p*q + q*p"), POLY_HORIZONS),
    "(b=n^2)^2": (lambda: _square(_jacobi("0", "n^2")), POLY_HORIZONS),
}

_RUNS = {}


def run(name):
    """classify with the suite horizons; cached with its wall time."""
    if name not in _RUNS:
        build, horizons = SUITE[name]
        op = build()
        t0 = time.perf_counter()
        res = classify(op, config=ClassifyConfig(defect_horizons=horizons))
        _RUNS[name] = (op, res, time.perf_counter() - t0)
    return _RUNS[name]


def _evidence(res, criterion):
    return next((e for e in res.evidence if e.criterion == criterion), None)


# ---------------------------------------------------------------- criterion 1

def test_criterion_1_carleman_boundary_sweep():
    problems = []
    for alpha in ("0.5", "1.0"):
        _, res, secs = run(f"b=n^{alpha}")
        est = res.deficiency
        car = _evidence(res, "carleman")
        if res.verdict != "ESA" or res.provenance != "carleman":
            problems.append(f"alpha={alpha}: {res.verdict} via {res.provenance}")
        if car is None or car.detail["series"]["kind"] != "Divergent":
            problems.append(f"alpha={alpha}: Carleman series not Divergent")
        if (est.n_plus, est.n_minus, est.confidence) != (0, 0, "Stable"):
            problems.append(f"alpha={alpha}: estimate ({est.n_plus},{est.n_minus}) {est.confidence}")
        if secs >= 10:
            problems.append(f"alpha={alpha}: {secs:.1f} s")
    for alpha in ("2.0", "3.0"):
        _, res, secs = run(f"b=n^{alpha}")
        est = res.deficiency
        if res.verdict != "NotESA":
            problems.append(f"alpha={alpha}: {res.verdict} via {res.provenance}")
        if (est.n_plus, est.n_minus, est.confidence) != (1, 1, "Stable"):
            problems.append(f"alpha={alpha}: estimate ({est.n_plus},{est.n_minus}) {est.confidence}")
        for tag, fams in est.families.items():
            final = fams[-1]
            for sol in final.l2():
                mass = sol.tail_profile[final.horizon]
                if not mass < 1e-8:
                    problems.append(f"alpha={alpha} z={tag}: final-window tail mass {mass:.3g}")
        if secs >= 10:
            problems.append(f"alpha={alpha}: {secs:.1f} s")
    assert not problems, "; ".join(problems)


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_ladder_operator_sanity():
    osc = truncate(_poly("p^2 + q^2"), 201)
    assert np.max(np.abs(osc - np.diag(2.0 * np.arange(201) + 1))) <= 1e-12
    comm = truncate(compile_poly(parse_ncpoly("p*q - q*p"), force=True), 21)
    assert np.max(np.abs(comm - (1 / 1j) * np.eye(21))) <= 1e-12


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_example_verdicts():
    problems = []
    _, res, secs = run("pqp")
    if res.verdict != "NotESA" or res.certificate is None:
        problems.append(f"pqp: {res.verdict} via {res.provenance}")
    elif res.certificate.series.kind != "Convergent":
        problems.append("pqp: certificate series not Convergent")
    times = {"pqp": secs}

    _, res, times["p^2-q^4"] = run("p^2-q^4")
    if res.verdict != "NotESA":
        problems.append(f"p^2-q^4: {res.verdict}")

    _, res, times["p^2+q^4"] = run("p^2+q^4")
    est = res.deficiency
    final_l2 = sum(f[-1].count("L2") for f in est.families.values())
    if est.families["+i"][-1].horizon != 4000 or final_l2:
        problems.append(f"p^2+q^4: {final_l2} L2 directions at N = 4000")
    if not est.stable_zero:
        problems.append("p^2+q^4: defect count not a Stable zero")
    if not (res.verdict == "ESA" or (res.verdict == "Inconclusive" and res.leaning == "ESA")):
        problems.append(f"p^2+q^4: {res.verdict} leaning {res.leaning!r}")

    _, res, times["pq+qp"] = run("pq+qp")
    if res.verdict != "ESA":
        problems.append(f"pq+qp: {res.verdict}")
    problems += [f"{k}: {v:.1f} s" for k, v in times.items() if v >= 60]
    assert not problems, "; ".join(problems)


# ---------------------------------------------------------------- criterion 4

def _levels_for(op, lad, N, wanted=200):
    J = 1
    while J < wanted and lad.cutoff(J + 2) + op.band_order < N - op.band_order:
        J += 1
    return J


def _check_vector(name, op, lad, sol, problems):
    x = sol.vector
    x = GradedVector(x.k, x.coeffs / np.linalg.norm(x.coeffs), x.horizon, label=x.label)
    r = sol.residual_vector
    J = _levels_for(op, lad, x.horizon)
    tag = f"{name} z={sol.eigentag} #{x.label}"
    c = local_seq(op, lad, x, J)
    b = offdiag_norm_seq(op, lad, J)
    # c_j <= b_j^2 pointwise, then the reciprocal partial sums
    bad = np.flatnonzero(c > b ** 2 * (1 + REL) + 1e-300)
    if bad.size:
        problems.append(f"{tag}: c_j > b_j^2 at j={int(bad[0]) + 1}")
    with np.errstate(divide="ignore", over="ignore"):
        lhs = np.cumsum(np.where(b > 0, 1 / b ** 2, 0.0))
        rhs = np.cumsum(np.where(c > 0, 1 / c, np.inf))
    bad = np.flatnonzero(lhs > rhs * (1 + REL))
    if bad.size:
        problems.append(f"{tag}: sum 1/b^2 exceeds sum 1/c at J={int(bad[0]) + 1}")

    if sol.z in (1j, -1j):
        for j in range(1, J + 1):
            est = check_basic_estimate(op, lad, j, x, r)
            if est.margin < -REL * max(est.rhs, 1e-300):
                problems.append(f"{tag}: basic estimate fails at j={j} (margin {est.margin:.3g})")
                break
            # x has unit norm, so the slack is measured against that scale
            if est.slack > REL:
                problems.append(f"{tag}: slack {est.slack:.3g} above 1e-8 relative at j={j}")
                break
        rep = check_growth_chain(op, lad, x, r, J)
        xi = xi_seq(lad, x, J + 1)
        gaps = np.diff(xi)
        core2 = np.maximum(rep.xi - rep.slack, 0.0) ** 2
        scale = np.maximum(rep.c * gaps, core2)
        if not rep.strict_below_one:
            problems.append(f"{tag}: xi_j reaches 1")
        bad = np.flatnonzero(rep.lower_margin < -REL * np.maximum(rep.xi, 1e-300))
        if bad.size:
            problems.append(f"{tag}: lower bound on c_j fails at j={int(bad[0]) + 1}")
        bad = np.flatnonzero(rep.chain_margin < -REL * np.maximum(scale, 1e-300))
        if bad.size:
            problems.append(f"{tag}: chain F(xi_j) <= xi_(j+1) fails at j={int(bad[0]) + 1}")
        if rep.slack.max() > REL:
            problems.append(f"{tag}: chain slack {rep.slack.max():.3g} above 1e-8 relative")

    if op.positive:
        d = quad_seq(op, lad, x, J, tol=REL)
        bad = np.flatnonzero(d > np.sqrt(c) * (1 + REL))
        if bad.size:
            problems.append(f"{tag}: d_n > sqrt(c_n) at n={int(bad[0]) + 1}")
        with np.errstate(divide="ignore", over="ignore"):
            lhs = np.cumsum(np.where(c > 0, c ** -0.5, np.inf))
            rhs = np.cumsum(np.where(d > 0, 1 / d, np.inf))
        bad = np.flatnonzero(lhs > rhs * (1 + REL))
        if bad.size:
            problems.append(f"{tag}: sum c^-1/2 exceeds sum 1/d at n={int(bad[0]) + 1}")
    return 1


def test_criterion_4_inequality_suite():
    problems, checked = [], 0
    for name, (build, horizons) in SUITE.items():
        op = build()
        if op.band_order == 0:
            continue
        if op.positive is None:
            op = op.flagged(positive=positivity_check(op).positive)
        lad = smooth_ladder(op, unit_ladder())
        N = 4000 if op.band_order > 1 else 20_000
        zs = (1j, -1j, -1.0) if op.positive else (1j, -1j)
        for z in zs:
            for sol in solve_family(op, z, N).solutions:
                if sol.vector is not None:
                    checked += _check_vector(name, op, lad, sol, problems)
    assert checked >= 20
    assert not problems, f"{len(problems)} violations: " + "; ".join(problems[:10])


# ---------------------------------------------------------------- criterion 5

def _random_sequence(seed):
    rng = np.random.default_rng(seed)
    if seed % 2 == 0:
        p = rng.uniform(0.5, 3.0)
        return f"j^{p:.4f}", (lambda j, p=p: j ** p)
    r = rng.uniform(1.1, 2.0)
    return f"{r:.4f}^j", (lambda j, r=r: _power(r, j))


def _power(r, j):
    # overflow to inf is intended: 1/c_j is then exactly 0
    with np.errstate(over="ignore"):
        return np.power(r, j)


def test_criterion_5_fun3_equivalence():
    t0 = time.perf_counter()
    disagreements, decisive = [], 0
    for seed in range(200):
        label, rule = _random_sequence(seed)
        res = fun3_equivalence(rule, 10_000)
        if res.vacuous:
            continue
        decisive += 1
        if not res.agree:
            disagreements.append(f"{label} (sum {res.sum_side.kind}, survivor {res.iter_side})")
    secs = time.perf_counter() - t0
    assert decisive > 0
    assert not disagreements, (f"{len(disagreements)}/{decisive} decisive sequences disagree: "
                               + ", ".join(disagreements[:8]))
    assert secs < 5, f"{secs:.2f} s"


# ---------------------------------------------------------------- criterion 6

def test_criterion_6_iteration_bound():
    J = 60
    tr = iterate_chain(lambda j: 2.0 ** j, 0.25, J)
    # independent product oracle, exact rationals
    from fractions import Fraction
    prod = Fraction(1)
    partial = []
    for i in range(1, J + 1):
        prod *= 1 + Fraction(1, 2 ** i)
        partial.append(float(prod / 4))
    total = float(prod / 4)
    assert total == pytest.approx(0.596, abs=1e-3)
    assert tr.bounded and tr.t.size == J
    assert np.all(tr.t < total) and np.all(tr.t <= np.array(partial))
    assert tr.t.max() < 1

    late = [float(xi) for xi in XI_GRID
            if iterate_chain(lambda j: np.ones_like(j), float(xi), 60).bounded]
    assert not late, f"grid points still below 1 after 60 steps with c = 1: {late}"


# ---------------------------------------------------------------- criterion 7

def test_criterion_7_nelson_multivariable():
    S = [generator_operator("p", 1, 2), generator_operator("q", 2, 2)]
    res = nelson_verdict(S)
    problems = []
    if res.commutator_residual != 0.0:
        problems.append(f"commutator residual {res.commutator_residual}")
    levels = 40
    lv = np.arange(1, levels + 1)
    x = geometric_probe(2, unit_ladder().cutoff(levels + 2) + 4)
    for i, op in enumerate(S, start=1):
        fit = growth_fit(local_seq(op, unit_ladder(), x, levels), lv, 1.1, 0.98)
        if not fit.passes:
            problems.append(f"c_{i}(n, geometric probe): slope {fit.slope:.3g}, R^2 {fit.r2:.3f}")
    if res.verdict != "JointESA":
        problems.append(f"verdict {res.verdict}")
    neg = nelson_verdict([generator_operator("p"), generator_operator("q")])
    if neg.verdict != "Refused" or abs(neg.commutator_residual - 1.0) > 1e-12 or neg.witness is None:
        problems.append(f"negative control: {neg.verdict}, residual {neg.commutator_residual}")
    assert not problems, "; ".join(problems)


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_cross_oracle_consistency():
    problems = []
    for name in SUITE:
        _, res, _ = run(name)
        est = res.deficiency
        if res.verdict == "ESA" and est.stable_nonzero:
            problems.append(f"{name}: ESA against ({est.n_plus},{est.n_minus}) Stable")
        if res.verdict == "NotESA" and est.stable_zero:
            problems.append(f"{name}: NotESA against (0,0) Stable")
        if res.provenance == "conflict":
            problems.append(f"{name}: a decisive test contradicted the estimate")
    assert not problems, "; ".join(problems)


# ---------------------------------------------------------------- criterion 9

@pytest.mark.parametrize("operator", [{"kind": "ncpoly", "expr": "p*q*p"}])
def test_criterion_9_determinism(tmp_path, operator):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"operator": operator}), encoding="utf-8")
    bodies = []
    for run_id in ("first", "second"):
        out = tmp_path / run_id
        assert cli.main(["analyze", "--config", str(cfg), "--out", str(out), "--seed", "11"]) == 0
        bodies.append((out / "report.json").read_bytes())
    assert bodies[0] == bodies[1]
