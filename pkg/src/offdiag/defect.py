"""Formal solutions of S* x = z x and their l2 classification.

Two solvers:

* ``solve_tridiagonal_defect``: the three-term recurrence with x_0 = 0,
  x_1 = 1, stored with a running log scale so growth like n^2 per step
  never overflows.
* ``solve_banded_defect``: forward elimination for band order d on k = 1.
  The formal solution space is d-dimensional (the first d amplitudes are
  free); its basis is kept orthonormal by periodic QR.

A solution is L2 when the mass fraction in the last dyadic window
[h/2, h) keeps shrinking geometrically as the horizon h doubles.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .graded import GradedOperator, GradedVector, graded_basis_size
from .jacobi import JacobiOperator, JacobiSpec, jacobi_from_operator

log = logging.getLogger(__name__)

RENORM_EVERY = 1000
# rows whose amplitudes have underflowed say nothing about backward error
UNDERFLOW_SCALE = 1e-200


@dataclass(frozen=True)
class TailRule:
    """Thresholds for the l2 decision.

    ``L2``: window mass ratio under horizon doubling below ``ratio`` at the two
    final doublings.  ``NotL2``: final window mass at least ``notl2_mass`` and
    no geometric decrease at the last doubling.  ``strong_mass`` marks L2
    solutions whose final window is already negligible.
    """

    ratio: float = 0.9
    notl2_mass: float = 1e-3
    strong_mass: float = 1e-8

    def halved(self) -> "TailRule":
        return TailRule(self.ratio, self.notl2_mass / 2, self.strong_mass / 2)

    def verdict(self, masses: Sequence[float]) -> Tuple[str, bool]:
        """``masses`` at horizons N/4, N/2, N; returns (verdict, strong)."""
        m1, m2, m3 = (float(m) for m in masses)
        r1 = m2 / m1 if m1 > 0 and math.isfinite(m2) else math.nan
        r2 = m3 / m2 if m2 > 0 and math.isfinite(m3) else math.nan
        if r1 < self.ratio and r2 < self.ratio:
            return "L2", m3 < self.strong_mass
        if m3 >= self.notl2_mass and not (r2 < self.ratio):
            return "NotL2", False
        return "Undecided", False


DEFAULT_RULE = TailRule()


@dataclass
class DefectSolution:
    z: complex
    vector: Optional[GradedVector]
    residual: float                  # ||(S* - z) x|| on rows below N - d, ||x|| = 1
    backward_error: float            # max_n |r_n| / (sum_m |S_nm x_m| + |z x_n|)
    tail_profile: Dict[int, float]   # horizon -> last dyadic window mass fraction
    verdict: str
    strong: bool = False
    excluded_rows: int = 0
    residual_vector: Optional[np.ndarray] = None

    @property
    def eigentag(self) -> str:
        return {1j: "+i", -1j: "-i", -1: "-1"}.get(self.z, str(self.z))

    def summary(self) -> dict:
        return {
            "z": self.eigentag,
            "verdict": self.verdict,
            "strong": bool(self.strong),
            "residual": float(self.residual),
            "backward_error": float(self.backward_error),
            "excluded_rows": int(self.excluded_rows),
            "tail_profile": {str(h): float(m) for h, m in sorted(self.tail_profile.items())},
        }

    def to_rows(self):
        """(degree-index, re, im, cumulative tail mass) rows."""
        c = self.vector.coeffs
        p = np.abs(c) ** 2
        tail = np.cumsum(p[::-1])[::-1] / max(p.sum(), 1e-300)
        return [(i, float(c[i].real), float(c[i].imag), float(tail[i])) for i in range(c.size)]


@dataclass
class DefectFamily:
    z: complex
    horizon: int
    solutions: List[DefectSolution] = field(default_factory=list)
    null_directions: int = 0
    note: str = ""

    def count(self, verdict: str = "L2") -> int:
        return sum(s.verdict == verdict for s in self.solutions)

    def l2(self) -> List[DefectSolution]:
        return [s for s in self.solutions if s.verdict == "L2"]


def _phase_fix(x: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(x)))
    if x[i] == 0:
        return x
    return x * (abs(x[i]) / x[i])


def _horizons(N: int) -> Tuple[int, int, int]:
    return (N // 4, N // 2, N)


def _masses_from_log(logp: np.ndarray, N: int) -> Dict[int, float]:
    """Window masses from log |x_n|^2 (index = degree)."""
    out = {}
    for h in _horizons(N):
        total = logsumexp(logp[:h])
        win = logsumexp(logp[h // 2:h])
        out[h] = float(np.exp(win - total)) if np.isfinite(total) else math.nan
    return out


def _masses(x: np.ndarray, N: int) -> Dict[int, float]:
    with np.errstate(divide="ignore"):
        return _masses_from_log(np.log(np.abs(x[:N]) ** 2), N)


def _residual_stats(rows: np.ndarray, absrows: np.ndarray, x: np.ndarray, z: complex,
                    n_rows: int) -> Tuple[float, float, np.ndarray]:
    r = rows @ x - z * x[:n_rows]
    scale = absrows @ np.abs(x) + abs(z) * np.abs(x[:n_rows])
    with np.errstate(divide="ignore", invalid="ignore"):
        back = np.where(scale > UNDERFLOW_SCALE, np.abs(r) / scale, 0.0)
    return float(np.linalg.norm(r)), float(back.max(initial=0.0)), r


# ------------------------------------------------------------ tridiagonal


def solve_tridiagonal_defect(spec: JacobiSpec, z: complex, N: int, scale: float = 1.0,
                             rule: TailRule = DEFAULT_RULE) -> DefectSolution:
    """Solve b_{n-1}x_{n-1} + a_n x_n + conj(b_n) x_{n+1} = z x_n, x_0 = 0."""
    if N < 8:
        raise ValueError("horizon too small")
    a = spec.a_values(N)
    b = spec.b_values(N)
    zero = np.flatnonzero(b[: N - 1] == 0)
    if zero.size:
        raise ValueError(f"b_{int(zero[0]) + 1} = 0: split the operator into blocks first")
    store = np.zeros(N, complex)     # store[n-1] ~ x_n
    logs = np.zeros(N)
    prev, cur, lscale = 0j, complex(scale), 0.0
    store[0] = cur
    for n in range(1, N):            # produce x_{n+1}
        bm = b[n - 2] if n >= 2 else 0.0
        nxt = ((z - a[n - 1]) * cur - bm * prev) / np.conj(b[n - 1])
        prev, cur = cur, nxt
        mag = abs(cur)
        if mag > 1e100 or (n % RENORM_EVERY == 0 and mag > 0) or (0 < mag < 1e-100):
            prev, cur = prev / mag, cur / mag
            lscale += math.log(mag)
        if not (np.isfinite(cur) and np.isfinite(prev)):
            return DefectSolution(z, None, math.inf, math.inf, {}, "Undecided")
        store[n] = cur
        logs[n] = lscale
    with np.errstate(divide="ignore"):
        logabs = np.log(np.abs(store)) + logs
    lognorm = 0.5 * logsumexp(2 * logabs)
    x = store * np.exp(logs - lognorm)
    masses = _masses_from_log(2 * logabs, N)
    verdict, strong = rule.verdict([masses[h] for h in _horizons(N)])
    # residual rows 1..N-1 (the last row needs x_{N+1})
    r = np.zeros(N - 1, complex)
    r += (a[: N - 1] - z) * x[: N - 1]
    r += np.conj(b[: N - 1]) * x[1:N]
    r[1:] += b[: N - 2] * x[: N - 2]
    scl = np.abs(a[: N - 1] - 0) * np.abs(x[: N - 1]) + abs(z) * np.abs(x[: N - 1]) \
        + np.abs(b[: N - 1]) * np.abs(x[1:N])
    scl[1:] += np.abs(b[: N - 2]) * np.abs(x[: N - 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        back = np.where(scl > UNDERFLOW_SCALE, np.abs(r) / scl, 0.0)
    vec = GradedVector(1, _phase_fix(x), N, label=f"defect z={z}")
    return DefectSolution(z, vec, float(np.linalg.norm(r)), float(back.max()), masses,
                          verdict, strong, excluded_rows=1, residual_vector=r)


# ----------------------------------------------------------------- banded


def _band_rows(op: GradedOperator, N: int) -> np.ndarray:
    """B[n, s + d] = S[n, n + s] for rows n < N."""
    d = op.band_order
    M = op.columns(N + d)[:N].tocsr()
    B = np.zeros((N, 2 * d + 1), complex)
    for s in range(-d, d + 1):
        diag = M.diagonal(s)
        if s >= 0:
            B[: diag.size, s + d] = diag
        else:
            B[-s: -s + diag.size, s + d] = diag
    return B


def solve_banded_defect(op: GradedOperator, z: complex, N: int, reorth: int = 10,
                        scale: float = 1.0, rule: TailRule = DEFAULT_RULE) -> DefectFamily:
    """Basis of formal solutions of S* x = z x up to degree N, classified.

    Directions are chosen to diagonalise the mass in the final window
    [N/2, N); the lightest directions are the l2 candidates.
    """
    if not op.hermitian:
        raise ValueError("defect equations need a symmetric operator")
    d = op.band_order
    fam = DefectFamily(z, N)
    if d == 0:
        fam.note = "diagonal operator: (lambda_n - z) x_n = 0 forces x = 0"
        return fam
    if op.k > 1:
        fam.null_directions = graded_basis_size(op.k, N + d) - graded_basis_size(op.k, N)
        fam.note = "k > 1: forward elimination is not unique; no solutions reported"
        return fam
    B = _band_rows(op, N)
    X = np.zeros((N + d, d), complex)
    X[:d] = np.eye(d) * scale
    singular = 0
    for n in range(N):
        lead = B[n, 2 * d]
        lo = max(0, n - d)
        coeffs = B[n, lo - n + d: 2 * d].copy()
        coeffs[n - lo] -= z
        if abs(lead) <= 1e-12 * max(np.abs(coeffs).max(initial=0.0), 1e-300):
            singular += 1
            continue
        X[n + d] = -(coeffs @ X[lo: n + d]) / lead
        if (n + 1) % reorth == 0:
            X[: n + d + 1] = np.linalg.qr(X[: n + d + 1])[0]
    if singular:
        fam.null_directions = singular
        fam.note = f"{singular} singular leading coefficients; solution space not unique"
        fam.solutions = [DefectSolution(z, None, math.nan, math.nan, {}, "Undecided")]
        return fam
    X = np.linalg.qr(X[:N])[0]
    W = X[N // 2:N]
    mu, V = np.linalg.eigh(W.conj().T @ W)
    n_rows = N - d
    diags, offsets = [], []
    for s in range(-d, d + 1):
        lo_row = max(0, -s)
        hi_row = min(n_rows, N - s)
        diags.append(B[lo_row:hi_row, s + d])
        offsets.append(s)
    rows = sp.diags(diags, offsets, shape=(n_rows, N), format="csr")
    absrows = abs(rows)
    for i in range(d):
        x = _phase_fix(X @ V[:, i])
        x = x / np.linalg.norm(x)
        masses = _masses(x, N)
        verdict, strong = rule.verdict([masses[h] for h in _horizons(N)])
        res, back, r = _residual_stats(rows, absrows, x, z, n_rows)
        fam.solutions.append(DefectSolution(
            z, GradedVector(1, x, N, label=f"defect z={z} #{i}"), res, back, masses,
            verdict, strong, excluded_rows=d, residual_vector=r))
    return fam


# ------------------------------------------------------------- estimation


def _tail_block(spec: JacobiSpec, N: int) -> Tuple[JacobiSpec, int]:
    """The last direct summand of a Jacobi operator with zero couplings."""
    b = spec.b_values(N)
    zero = np.flatnonzero(b[: N - 1] == 0)
    if zero.size == 0:
        return spec, 0
    m = int(zero[-1]) + 1            # b_m = 0 decouples e_1..e_m
    a_all = spec.a_values(N)
    return JacobiSpec(a_all[m:], b[m:], N - m), m


def solve_family(op: GradedOperator, z: complex, N: int, rule: TailRule = DEFAULT_RULE,
                 scale: float = 1.0) -> DefectFamily:
    """Dispatch to the tridiagonal recurrence when the operator allows it."""
    if op.k == 1 and op.band_order == 1:
        spec = op.spec if isinstance(op, JacobiOperator) else jacobi_from_operator(op, 2 * N + 2)
        tail, offset = _tail_block(spec, 2 * N + 2)
        fam = DefectFamily(z, N)
        if offset:
            fam.note = f"zero coupling at n = {offset}; analysed the tail block"
        if N - offset < 64:
            fam.note += "; tail block too short"
            fam.solutions = [DefectSolution(z, None, math.nan, math.nan, {}, "Undecided")]
            return fam
        sol = solve_tridiagonal_defect(tail, z, N - offset, scale=scale, rule=rule)
        if offset and sol.vector is not None:
            # embed the tail-block solution back into the full basis
            pad = np.zeros(offset, complex)
            sol.vector = GradedVector(1, np.concatenate([pad, sol.vector.coeffs]), N,
                                      label=sol.vector.label)
            sol.residual_vector = np.concatenate([pad, sol.residual_vector])
            sol.excluded_rows += offset
        fam.solutions = [sol]
        return fam
    return solve_banded_defect(op, z, N, scale=scale, rule=rule)


@dataclass
class DeficiencyEstimate:
    n_plus: int
    n_minus: int
    confidence: str                  # "Stable" | "Low"
    families: Dict[str, List[DefectFamily]]
    reasons: List[str] = field(default_factory=list)

    @property
    def stable_nonzero(self) -> bool:
        return self.confidence == "Stable" and (self.n_plus > 0 or self.n_minus > 0)

    @property
    def stable_zero(self) -> bool:
        return self.confidence == "Stable" and self.n_plus == 0 and self.n_minus == 0

    def summary(self) -> dict:
        return {
            "n_plus": self.n_plus,
            "n_minus": self.n_minus,
            "confidence": self.confidence,
            "reasons": list(self.reasons),
            "solutions": {tag: [{"horizon": f.horizon, "null_directions": f.null_directions,
                                 "note": f.note, "solutions": [s.summary() for s in f.solutions]}
                                for f in fams] for tag, fams in self.families.items()},
        }


def _recount(fam: DefectFamily, rule: TailRule) -> int:
    n = 0
    for s in fam.solutions:
        if s.tail_profile:
            masses = [s.tail_profile[h] for h in sorted(s.tail_profile)[-3:]]
            n += rule.verdict(masses)[0] == "L2"
    return n


def estimate_deficiency_indices(op: GradedOperator, horizons: Sequence[int] = (4000, 8000),
                                rule: TailRule = DEFAULT_RULE,
                                zs: Sequence[complex] = (1j, -1j)) -> DeficiencyEstimate:
    """Count L2 directions at z = +i and -i over the last two horizons."""
    horizons = sorted(horizons)[-2:]
    fams: Dict[str, List[DefectFamily]] = {}
    counts = {}
    reasons = []
    for z in zs:
        tag = {1j: "+i", -1j: "-i"}.get(z, str(z))
        fams[tag] = [solve_family(op, z, N, rule) for N in horizons]
        per_h = [f.count("L2") for f in fams[tag]]
        halved = [_recount(f, rule.halved()) for f in fams[tag]]
        final = fams[tag][-1]
        counts[tag] = per_h[-1]
        if len(set(per_h)) > 1:
            reasons.append(f"{tag}: L2 count changes with horizon {per_h}")
        if halved != per_h:
            reasons.append(f"{tag}: L2 count changes when thresholds are halved")
        if final.count("Undecided") or final.null_directions:
            reasons.append(f"{tag}: undecided directions at horizon {final.horizon}")
    conf = "Low" if reasons else "Stable"
    log.info("deficiency estimate %s (%s)", counts, conf)
    return DeficiencyEstimate(counts.get("+i", 0), counts.get("-i", 0), conf, fams, reasons)


def certify_in_domain(op: GradedOperator, sol: DefectSolution,
                      rule: TailRule = DEFAULT_RULE) -> Tuple[bool, Dict[int, float]]:
    """Check that the formal image S* x is itself l2 within the horizon."""
    if sol.vector is None or sol.verdict != "L2":
        return False, {}
    x = sol.vector.coeffs
    N = x.size
    d = op.band_order
    y = op.columns(N)[: N - d] @ x if op.k == 1 else None
    if y is None:
        return False, {}
    masses = _masses(np.asarray(y).ravel(), N - d)
    verdict, _ = rule.verdict([masses[h] for h in _horizons(N - d)])
    return verdict == "L2", masses
