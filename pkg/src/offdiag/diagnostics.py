"""Off-diagonal measurements along a projection ladder and pointwise checks.

For level j with cutoff n_j and band order d, the block P_j^perp S P_j only
involves rows of degree [n_j, n_j + d) and columns of degree [n_j - d, n_j).
Every quantity here is read off that block exactly.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .graded import (GradedOperator, GradedVector, ProjectionLadder, basis, block_norms,
                     graded_basis_size)


class HorizonTooSmall(ValueError):
    def __init__(self, required: int, have: int):
        super().__init__(f"vector evaluated to degree {have}; need horizon >= {required}")
        self.required = required


class ShiftMismatch(ValueError):
    def __init__(self, shift: int):
        super().__init__(f"ladder has smoothness shift {shift}; these checks need shift 1")
        self.shift = shift


class NotPositive(ValueError):
    pass


class NotDefectVector(ValueError):
    pass


class InvariantViolation(RuntimeError):
    """A proven inequality failed beyond tolerance: a bug, not a verdict."""


@dataclass
class _Levels:
    op: GradedOperator
    cutoffs: np.ndarray
    matrix: sp.csr_matrix
    rows: List[slice]
    cols: List[slice]

    def block(self, j: int) -> sp.csr_matrix:
        return self.matrix[self.rows[j - 1], self.cols[j - 1]]


def _levels(op: GradedOperator, ladder: ProjectionLadder, J: int) -> _Levels:
    cut = ladder.cutoffs(J)
    d = op.band_order
    m = op.columns(int(cut[-1]))
    b = basis(op.k, int(cut[-1]) + d)
    rows = [b.degree_range(n, n + d) for n in cut]
    cols = [b.degree_range(n - d, n) for n in cut]
    return _Levels(op, cut, m, rows, cols)


def _coeffs(x: GradedVector, needed: int) -> np.ndarray:
    if x.horizon < needed:
        if x.rule is None and x.max_degree < x.horizon:
            return x.padded(needed)          # finitely supported: zeros are exact
        if x.rule is not None:
            return x.extend(needed).coeffs
        raise HorizonTooSmall(needed, x.horizon)
    return x.coeffs


def offdiag_norm_seq(op: GradedOperator, ladder: ProjectionLadder, J: int, seed: int = 0) -> np.ndarray:
    """b_j = ||P_j^perp S P_j||, j = 1..J."""
    if not op.hermitian:
        raise ValueError("off-diagonal norms are defined for symmetric operators")
    return block_norms(op, ladder, J, seed)


def _images(lv: _Levels, x: np.ndarray, J: int) -> List[np.ndarray]:
    """P_j^perp S P_j x restricted to its support rows, for each level."""
    return [np.asarray(lv.block(j) @ x[lv.cols[j - 1]]).ravel() for j in range(1, J + 1)]


def local_seq(op: GradedOperator, ladder: ProjectionLadder, x: GradedVector, J: int) -> np.ndarray:
    """c_j(x) = ||P_j^perp S P_j x||^2, j = 1..J."""
    lv = _levels(op, ladder, J)
    xc = _coeffs(x, int(lv.cutoffs[-1]) + op.band_order)
    return np.array([float(np.vdot(y, y).real) for y in _images(lv, xc, J)])


def quad_seq(op: GradedOperator, ladder: ProjectionLadder, x: GradedVector, J: int,
             tol: float = 1e-9) -> np.ndarray:
    """d_n(x) = |<x, P_n^perp L P_n x>| for a positive operator L.

    The bound d_n(x) <= c_n(x)^(1/2) ||x|| is checked on the way; a breach
    beyond ``tol`` raises InvariantViolation.
    """
    if op.positive is not True:
        raise NotPositive("quad_seq needs an operator flagged positive (run positivity_check)")
    lv = _levels(op, ladder, J)
    xc = _coeffs(x, int(lv.cutoffs[-1]) + op.band_order)
    xnorm = float(np.linalg.norm(xc))
    out = np.empty(J)
    for j, y in enumerate(_images(lv, xc, J), start=1):
        d = abs(np.vdot(xc[lv.rows[j - 1]], y))
        c = float(np.vdot(y, y).real)
        if d > math.sqrt(c) * xnorm + tol * max(1.0, math.sqrt(c) * xnorm):
            raise InvariantViolation(f"d_{j} = {d} exceeds sqrt(c_{j}) ||x|| = {math.sqrt(c) * xnorm}")
        out[j - 1] = d
    return out


def xi_seq(ladder: ProjectionLadder, x: GradedVector, J: int) -> np.ndarray:
    """xi_j = ||P_j x||^2, j = 1..J."""
    cut = ladder.cutoffs(J)
    xc = _coeffs(x, int(cut[-1]))
    p = np.cumsum(np.abs(xc) ** 2)
    return np.array([p[graded_basis_size(x.k, int(n)) - 1] for n in cut])


def detect_smoothness_shift(op: GradedOperator, ladder: ProjectionLadder, levels: int = 50) -> int:
    """Smallest m with P_{j+m} S P_j = S P_j, verified on the first levels."""
    d = op.band_order
    if d == 0:
        return 0
    m = math.ceil(d / ladder.min_gap(levels))
    cut = ladder.cutoffs(levels + m)
    M = op.columns(int(cut[levels - 1]))
    for j in range(1, levels + 1):
        cols = graded_basis_size(op.k, int(cut[j - 1]))
        lo = graded_basis_size(op.k, int(cut[j + m - 1]))
        if lo < M.shape[0] and M[lo:, :cols].count_nonzero():
            raise InvariantViolation(f"band order {d} leaks past P_(j+{m}) at level {j}")
    return m


def smooth_ladder(op: GradedOperator, ladder: ProjectionLadder) -> ProjectionLadder:
    """Relabel a uniform ladder so that the smoothness shift becomes 1."""
    m = detect_smoothness_shift(op, ladder)
    return ladder.coarsen(m) if m > 1 else ladder


# ----------------------------------------------------------------- checks


def _residual_slack(residual, x: np.ndarray, k: int, n_j: int) -> float:
    """Bound on |<P_j x, r>| where r = (S* - z) x."""
    size = graded_basis_size(k, n_j)
    px = float(np.linalg.norm(x[:size]))
    if residual is None:
        return 0.0
    if np.ndim(residual) == 0:
        return float(residual) * px
    r = np.asarray(residual)
    if r.size < size:
        raise HorizonTooSmall(n_j, r.size)
    return abs(complex(np.vdot(x[:size], r[:size])))


@dataclass
class BasicEstimate:
    level: int
    lhs: float            # ||P^perp S P x|| * ||P^perp x||
    rhs: float            # ||P x||^2
    im_part: float        # Im <P^perp S P x, P^perp x>
    slack: float
    holds: bool
    identity_gap: float   # | |Im| - ||Px||^2 |

    @property
    def margin(self) -> float:
        return self.lhs + self.slack - self.rhs


def check_basic_estimate(op: GradedOperator, ladder: ProjectionLadder, j: int, x: GradedVector,
                         residual=None, tol: float = 1e-9) -> BasicEstimate:
    """||P_j^perp S P_j x|| ||P_j^perp x|| + slack >= ||P_j x||^2 - tol.

    ``residual`` is a scalar bound on ||(S* - z) x|| or the residual vector
    itself (which gives the sharper slack |<P_j x, r>|).
    """
    lv = _levels(op, ladder, j)
    n_j = int(lv.cutoffs[-1])
    xc = _coeffs(x, n_j + op.band_order)
    y = np.asarray(lv.block(j) @ xc[lv.cols[-1]]).ravel()
    size = graded_basis_size(op.k, n_j)
    px2 = float(np.vdot(xc[:size], xc[:size]).real)
    perp2 = max(float(np.vdot(xc, xc).real) - px2, 0.0)
    lhs = float(np.linalg.norm(y)) * math.sqrt(perp2)
    im = float(np.vdot(y, xc[lv.rows[-1]]).imag)
    slack = _residual_slack(residual, xc, op.k, n_j)
    return BasicEstimate(j, lhs, px2, im, slack, lhs + slack >= px2 - tol,
                         abs(abs(im) - px2))


@dataclass
class ChainReport:
    levels: np.ndarray
    xi: np.ndarray
    c: np.ndarray
    slack: np.ndarray
    chain_margin: np.ndarray      # c_j (xi_{j+1} - xi_j) - (xi_j - s_j)_+^2
    lower_margin: np.ndarray      # sqrt(c_j) sqrt(1 - xi_j) - (xi_j - s_j)
    strict_below_one: bool
    holds: bool
    max_relative_slack: float

    def failures(self) -> List[int]:
        bad = (self.chain_margin < -1e-12 * np.maximum(self.c, 1.0)) | (self.lower_margin < -1e-12)
        return [int(j) for j in self.levels[bad]]


def check_growth_chain(op: GradedOperator, ladder: ProjectionLadder, x: GradedVector,
                       residual, J: int) -> ChainReport:
    """Check xi_j < 1, the lower bound on sqrt(c_j) and F_{c_j}(xi_j) <= xi_{j+1}.

    Needs shift-1 smoothness and a unit vector that is not finitely supported.
    The slack s_j bounds |<P_j x, r>|; the chain is checked in the
    division-free form c_j (xi_{j+1} - xi_j) >= (xi_j - s_j)^2.
    """
    shift = detect_smoothness_shift(op, ladder)
    if shift != 1:
        raise ShiftMismatch(shift)
    if x.rule is None and x.max_degree < ladder.cutoff(J + 1):
        raise NotDefectVector("finitely supported vector: xi_j reaches ||x||^2, not a defect vector")
    lv = _levels(op, ladder, J + 1)
    top = int(lv.cutoffs[-1]) + op.band_order
    xc = _coeffs(x, top)
    xc = xc / np.linalg.norm(xc)
    ys = _images(lv, xc, J)
    c = np.array([float(np.vdot(y, y).real) for y in ys])
    sizes = [graded_basis_size(op.k, int(n)) for n in lv.cutoffs]
    p = np.abs(xc) ** 2
    xi = np.array([p[:s].sum() for s in sizes])
    gaps = np.array([p[sizes[i]:sizes[i + 1]].sum() for i in range(J)])
    s = np.array([_residual_slack(residual, xc, op.k, int(n)) for n in lv.cutoffs[:J]])
    core = np.maximum(xi[:J] - s, 0.0)
    chain = c * gaps - core ** 2
    lower = np.sqrt(c) * np.sqrt(np.maximum(1 - xi[:J], 0)) - (xi[:J] - s)
    below = bool(np.all(xi[: J + 1] < 1.0))
    rel = float(np.max(s / np.maximum(xi[:J], 1e-300))) if J else 0.0
    rep = ChainReport(np.arange(1, J + 1), xi[:J], c, s, chain, lower, below, True, rel)
    rep.holds = below and not rep.failures()
    return rep


def restricted_block_norm(op: GradedOperator, ladder: ProjectionLadder, j: int,
                          space: np.ndarray) -> float:
    """||P_j^perp S P_j restricted to span(space)|| for orthonormal columns."""
    lv = _levels(op, ladder, j)
    q, _ = np.linalg.qr(space)
    img = lv.block(j) @ q[lv.cols[-1]]
    return float(np.linalg.norm(np.asarray(img), 2)) if img.size else 0.0


# ----------------------------------------------------------------- report


@dataclass
class OffDiagReport:
    levels: np.ndarray
    b: np.ndarray
    c: Optional[np.ndarray] = None
    d: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    slack: Optional[np.ndarray] = None
    probe_id: str = ""

    def rows(self):
        cols = [self.b, self.c, self.d, self.xi, self.slack]
        for i, j in enumerate(self.levels):
            yield [int(j)] + ["" if col is None else repr(float(col[i])) for col in cols]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "b", "c", "d", "xi", "slack"])
        w.writerows(self.rows())
        return buf.getvalue()


def build_report(op: GradedOperator, ladder: ProjectionLadder, J: int,
                 x: Optional[GradedVector] = None, residual=None, seed: int = 0,
                 probe_id: str = "") -> OffDiagReport:
    rep = OffDiagReport(np.arange(1, J + 1), offdiag_norm_seq(op, ladder, J, seed), probe_id=probe_id)
    if x is not None:
        rep.c = local_seq(op, ladder, x, J)
        rep.xi = xi_seq(ladder, x, J)
        if op.positive is True:
            rep.d = quad_seq(op, ladder, x, J)
        xc = _coeffs(x, int(ladder.cutoff(J)))
        rep.slack = np.array([_residual_slack(residual, xc, op.k, int(n)) for n in ladder.cutoffs(J)])
    return rep
