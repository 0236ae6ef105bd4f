"""Finite-horizon decisions about positive series and the iteration F_c.

A series is judged from its first N terms only, so every verdict is one of
Divergent / Convergent / Undecided with the evidence attached:

* partial-sum growth: log-log slope of S_n over the final decade [N/10, N];
* Cauchy condensation: windows B(m) = sum_{m <= n < 2m} a_n for m in
  [N/10, N/2]; B(2m) / B(m) -> rho, and rho < 1 is the convergence signal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

Terms = Union[Callable[[np.ndarray], np.ndarray], Sequence[float], np.ndarray]

DIVERGE_SUM = 1e6
DIVERGE_EXPONENT = 0.02
DIVERGE_R2 = 0.99
DIVERGE_RHO = 0.995
CONVERGE_RHO = 0.9
CONVERGE_R2 = 0.99
CAUCHY_CERT = 1e-10


def _fit(x: np.ndarray, y: np.ndarray):
    """Least-squares line y = s x + b; returns (slope, R^2)."""
    if x.size < 3:
        return math.nan, math.nan
    scale = float(np.max(np.abs(y)))
    if not math.isfinite(scale):
        return math.nan, math.nan
    scale = scale or 1.0
    ys = y / scale                       # keeps the squares below overflow
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]) * scale, r2


@dataclass
class SeriesVerdict:
    kind: str                               # Divergent | Convergent | Undecided
    horizon: int
    partial_sums: Dict[int, float]          # sampled at powers of two and the horizon
    growth_fit: Dict[str, float]            # exponent, r2, log_slope, log_r2
    rho: float                              # condensation ratio per doubling
    rho_r2: float
    tail_bound: float                       # geometric estimate of the remainder
    cauchy_increment: float                 # S_N - S_{N/10}
    certified: bool                         # Cauchy increment below 1e-10
    excluded: List[int] = field(default_factory=list)
    reason: str = ""

    @property
    def total(self) -> float:
        return self.partial_sums[max(self.partial_sums)] if self.partial_sums else 0.0

    @property
    def limit_estimate(self) -> float:
        return self.total + (self.tail_bound if math.isfinite(self.tail_bound) else 0.0)

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "horizon": self.horizon,
            "total": self.total,
            "rho": self.rho,
            "rho_r2": self.rho_r2,
            "tail_bound": self.tail_bound,
            "cauchy_increment": self.cauchy_increment,
            "certified": self.certified,
            "growth_fit": dict(self.growth_fit),
            "excluded": self.excluded[:20],
            "excluded_count": len(self.excluded),
            "reason": self.reason,
        }


def _evaluate(terms: Terms, horizon: Optional[int]) -> np.ndarray:
    if callable(terms):
        if horizon is None:
            raise ValueError("a horizon is needed for rule-defined terms")
        return np.asarray(terms(np.arange(1, horizon + 1, dtype=float)), dtype=float)
    arr = np.asarray(terms, dtype=float)
    return arr if horizon is None else arr[:horizon]


def series_test(terms: Terms, horizon: Optional[int] = None) -> SeriesVerdict:
    """Decide sum a_n from a_1..a_N (zero and non-finite terms excluded)."""
    a = _evaluate(terms, horizon).copy()
    if np.any(a < 0):
        raise ValueError("series_test needs non-negative terms")
    bad = ~np.isfinite(a) | (a == 0)
    excluded = [int(i) + 1 for i in np.flatnonzero(bad)]
    a[bad] = 0.0
    pos = np.flatnonzero(a > 0)
    N = int(pos[-1]) + 1 if pos.size else 0
    full = a.size
    if N < 20:
        S = float(a.sum())
        kind = "Convergent" if N > 0 and full >= 20 else "Undecided"
        return SeriesVerdict(kind, full, {full: S}, {}, 0.0, math.nan, 0.0, 0.0, kind == "Convergent",
                             excluded, "terms vanish beyond the first few indices" if kind == "Convergent"
                             else "too few terms")
    a = a[:N]
    S = np.cumsum(a)
    samples = {}
    p = 1
    while p <= N:
        samples[p] = float(S[p - 1])
        p *= 2
    samples[N] = float(S[-1])

    lo = max(N // 10, 1)
    grid = np.unique(np.geomspace(lo, N, 50).astype(int))
    ln = np.log(grid.astype(float))
    lS = np.log(S[grid - 1])
    exponent, r2 = _fit(ln, lS)
    log_slope, log_r2 = _fit(ln, S[grid - 1])

    ms = np.unique(np.geomspace(max(lo, 1), N // 2, 16).astype(int))
    ms = ms[ms >= 1]
    # window sums taken directly: differences of saturated partial sums cancel
    blocks = np.array([a[m - 1:2 * m - 1].sum() for m in ms])
    ok = blocks > 0
    rho, rho_r2 = math.nan, math.nan
    if ok.sum() >= 3:
        slope, rho_r2 = _fit(np.log2(ms[ok].astype(float)), np.log2(blocks[ok]))
        rho = 2.0 ** slope
    # direct doubling ratios where both windows are available
    ratios = []
    for m in ms:
        if 4 * m - 2 < N:
            b1 = a[m - 1:2 * m - 1].sum()
            b2 = a[2 * m - 1:4 * m - 1].sum()
            if b1 > 0:
                ratios.append(b2 / b1)
    max_ratio = float(max(ratios)) if ratios else math.nan

    cut = N // 10
    increment = float(a[cut:].sum())
    last_block = float(a[N // 2:].sum())
    tail = last_block * rho / (1.0 - rho) if rho < 1 else math.inf
    fit = {"exponent": exponent, "r2": r2, "log_slope": log_slope, "log_r2": log_r2,
           "max_block_ratio": max_ratio}

    truncated = N < full    # trailing terms underflowed to zero
    if S[-1] > DIVERGE_SUM:
        kind, why = "Divergent", "partial sums exceed 1e6"
    elif rho >= DIVERGE_RHO and exponent > DIVERGE_EXPONENT and r2 > DIVERGE_R2:
        kind, why = "Divergent", f"partial sums grow like n^{exponent:.3g} (R^2 {r2:.4f})"
    elif rho <= CONVERGE_RHO and (rho_r2 >= CONVERGE_R2 or max_ratio <= CONVERGE_RHO):
        kind, why = "Convergent", f"condensation ratio {rho:.3g} per doubling"
    elif truncated and (max_ratio <= CONVERGE_RHO or rho <= CONVERGE_RHO):
        kind, why = "Convergent", "terms decay below floating range"
    else:
        kind, why = "Undecided", f"rho {rho:.4g}, growth exponent {exponent:.3g} (R^2 {r2:.3f})"
    return SeriesVerdict(kind, full, samples, fit, rho, rho_r2,
                         tail if kind == "Convergent" else math.inf, increment,
                         increment < CAUCHY_CERT, excluded, why)


def reciprocal_series(values: np.ndarray, power: float = 1.0) -> SeriesVerdict:
    """series_test on 1/v^power, with v = 0 entries excluded and reported."""
    v = np.abs(np.asarray(values, dtype=complex)).astype(float)
    with np.errstate(divide="ignore"):
        terms = np.where(v > 0, v ** (-power), 0.0)
    res = series_test(terms)
    res.excluded = [int(i) + 1 for i in np.flatnonzero(v == 0)]
    return res


# -------------------------------------------------------------- iteration


@dataclass
class IterationTrace:
    xi0: float
    t: np.ndarray
    bounded: bool
    escaped_at: Optional[int]
    product_bound: np.ndarray
    boundary: bool = False

    def summary(self) -> dict:
        return {"xi0": self.xi0, "steps": int(self.t.size), "bounded": self.bounded,
                "escaped_at": self.escaped_at, "sup_t": float(self.t.max(initial=self.xi0)),
                "boundary": self.boundary,
                "product_bound_final": float(self.product_bound[-1]) if self.product_bound.size else self.xi0}


def _inverse(c_seq, J: int) -> List[float]:
    c = _evaluate(c_seq, J) if not callable(c_seq) else np.asarray(c_seq(np.arange(1, J + 1, dtype=float)), float)
    if c.size < J:
        raise ValueError(f"sequence has {c.size} terms, {J} requested")
    if np.any(c <= 0):
        raise ValueError("iteration needs positive c_j (use inf for vanishing terms)")
    with np.errstate(divide="ignore"):
        return (1.0 / c).tolist()


def _run(inv: List[float], xi: float) -> int:
    """Steps until t >= 1 (returns len(inv) + 1 if it never escapes)."""
    t = xi
    for j, w in enumerate(inv, start=1):
        t = t + t * t * w
        if t >= 1.0:
            return j
    return len(inv) + 1


def iterate_chain(c_seq: Terms, xi0: float, J: int) -> IterationTrace:
    """t_1 = F_{c_1}(xi0), t_{j+1} = F_{c_{j+1}}(t_j), F_c(s) = s + s^2 / c."""
    if not 0.0 < xi0 < 1.0:
        raise ValueError("xi0 must lie in (0, 1)")
    inv = _inverse(c_seq, J)
    t = np.empty(J)
    cur = xi0
    escaped = None
    for j, w in enumerate(inv, start=1):
        cur = cur + cur * cur * w
        t[j - 1] = cur
        if cur >= 1.0:
            escaped = j
            break
    t = t[: escaped or J]
    bound = xi0 * np.exp(np.cumsum(np.log1p(np.asarray(inv[: t.size]))))
    sup = float(t.max(initial=xi0))
    return IterationTrace(xi0, t, escaped is None, escaped, bound,
                          boundary=escaped is None and 1.0 - sup < 1e-12)


XI_GRID = np.round(np.arange(1, 100) / 100.0, 2)


@dataclass
class Fun3Result:
    agree: bool
    sum_side: SeriesVerdict
    iter_side: bool                  # some grid xi keeps t_j < 1 over the horizon
    largest_surviving_xi: Optional[float]
    escape_step_smallest_xi: Optional[int]
    vacuous: bool

    def summary(self) -> dict:
        return {"agree": self.agree, "sum_side": self.sum_side.kind, "iter_side": self.iter_side,
                "largest_surviving_xi": self.largest_surviving_xi,
                "escape_step_smallest_xi": self.escape_step_smallest_xi, "vacuous": self.vacuous}


def fun3_equivalence(c_seq: Terms, horizon: int) -> Fun3Result:
    """Compare sum 1/c_j < inf with survival of some grid xi under F iteration.

    t_j is increasing in xi, so survival of the smallest grid point decides
    existence; the largest survivor is located by bisection.
    """
    inv = _inverse(c_seq, horizon)
    sums = series_test(np.asarray(inv))
    esc = _run(inv, float(XI_GRID[0]))
    exists = esc > horizon
    largest = None
    if exists:
        lo, hi = 0, len(XI_GRID) - 1          # lo survives
        if _run(inv, float(XI_GRID[hi])) > horizon:
            lo = hi
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if _run(inv, float(XI_GRID[mid])) > horizon:
                lo = mid
            else:
                hi = mid
        largest = float(XI_GRID[lo])
    vacuous = sums.kind == "Undecided"
    agree = True if vacuous else (sums.kind == "Convergent") == exists
    return Fun3Result(agree, sums, exists, largest, None if exists else esc, vacuous)
