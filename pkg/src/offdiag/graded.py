"""Graded basis, vectors and banded operators over multi-index states.

States are multi-indices alpha in N^k ordered by degree |alpha|; inside one
degree the larger leading component comes first, e.g. for k = 2::

    (0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...

so the states of degree < n occupy the first ``graded_basis_size(k, n)``
positions.  Every operator is stored through exact column blocks: the
images of all states of degree < n live in degrees < n + d.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

MultiIndex = Tuple[int, ...]

# Basis sizes beyond this are refused rather than silently allocated.
MAX_BASIS = 50_000_000


class ModeMismatch(ValueError):
    pass


def graded_basis_size(k: int, n: int) -> int:
    """Number of multi-indices in N^k with degree < n.

    Equals binom(n - 1 + k, k) for n >= 1 and 0 for n = 0.
    """
    if k < 1 or n < 0:
        raise ValueError(f"need k >= 1 and n >= 0, got k={k}, n={n}")
    if n == 0:
        return 0
    size = math.comb(n - 1 + k, k)
    if size > MAX_BASIS:
        raise OverflowError(f"graded basis for k={k}, n={n} has {size} states")
    return size


def degree(alpha: Sequence[int]) -> int:
    return int(sum(alpha))


def _compositions(m: int, k: int):
    if k == 1:
        yield (m,)
        return
    for first in range(m, -1, -1):
        for rest in _compositions(m - first, k - 1):
            yield (first,) + rest


@lru_cache(maxsize=64)
def _states(k: int, n: int) -> np.ndarray:
    if k == 1:
        return np.arange(n, dtype=np.int64).reshape(-1, 1)
    rows = [c for m in range(n) for c in _compositions(m, k)]
    return np.array(rows, dtype=np.int64).reshape(-1, k)


class GradedBasis:
    """Enumeration of states of degree < n for k modes (cached, read-only)."""

    def __init__(self, k: int, n: int):
        graded_basis_size(k, n)
        self.k = k
        self.n = n
        self.states = _states(k, n)
        self.states.setflags(write=False)
        self._lookup: Optional[Dict[MultiIndex, int]] = None

    def __len__(self) -> int:
        return self.states.shape[0]

    def degree_range(self, lo: int, hi: int) -> slice:
        """Positions of states with lo <= degree < hi."""
        lo, hi = max(lo, 0), min(max(hi, 0), self.n)
        if hi <= lo:
            return slice(0, 0)
        return slice(graded_basis_size(self.k, lo), graded_basis_size(self.k, hi))

    def index(self, states: np.ndarray) -> np.ndarray:
        """Positions of an (m, k) array of states; -1 where out of range."""
        states = np.asarray(states, dtype=np.int64).reshape(-1, self.k)
        deg = states.sum(axis=1)
        ok = (deg < self.n) & (states >= 0).all(axis=1)
        if self.k == 1:
            return np.where(ok, states[:, 0], -1)
        if self._lookup is None:
            self._lookup = {tuple(s): i for i, s in enumerate(self.states.tolist())}
        out = np.full(states.shape[0], -1, dtype=np.int64)
        for r in np.flatnonzero(ok):
            out[r] = self._lookup[tuple(states[r].tolist())]
        return out


def basis(k: int, n: int) -> GradedBasis:
    return _basis_cached(k, n)


@lru_cache(maxsize=64)
def _basis_cached(k: int, n: int) -> GradedBasis:
    return GradedBasis(k, n)


# ---------------------------------------------------------------- vectors


@dataclass(frozen=True)
class GradedVector:
    """Amplitudes over the graded basis, stored densely for degrees < horizon.

    Finitely supported vectors have a finite ``max_degree``.  Vectors defined
    by a coefficient ``rule`` are l2 objects evaluated up to ``horizon``; their
    ``tail_bound`` bounds the squared norm of everything beyond it.
    """

    k: int
    coeffs: np.ndarray
    horizon: int
    rule: Optional[Callable[[np.ndarray], np.ndarray]] = None
    tail_bound: float = 0.0
    label: str = ""

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != (graded_basis_size(self.k, self.horizon),):
            raise ValueError("coefficient array does not match the horizon")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, k: int, horizon: int = 1) -> "GradedVector":
        return cls(k, np.zeros(graded_basis_size(k, horizon), complex), horizon)

    @classmethod
    def basis_state(cls, alpha: Sequence[int]) -> "GradedVector":
        return cls.from_entries(len(alpha), {tuple(alpha): 1.0})

    @classmethod
    def from_entries(cls, k: int, entries: Dict[MultiIndex, complex]) -> "GradedVector":
        top = max((degree(a) for a, v in entries.items() if v != 0), default=0)
        b = basis(k, top + 1)
        c = np.zeros(len(b), complex)
        if entries:
            keys = np.array(list(entries.keys()), dtype=np.int64).reshape(-1, k)
            c[b.index(keys)] = np.array(list(entries.values()), dtype=complex)
        return cls(k, c, top + 1)

    @classmethod
    def from_array(cls, k: int, coeffs: np.ndarray, label: str = "",
                   tail_bound: float = 0.0) -> "GradedVector":
        coeffs = np.asarray(coeffs, dtype=complex)
        n = 0
        while graded_basis_size(k, n) < coeffs.size:
            n += 1
        c = np.zeros(graded_basis_size(k, n), complex)
        c[: coeffs.size] = coeffs
        return cls(k, c, n, label=label, tail_bound=tail_bound)

    @classmethod
    def from_rule(cls, k: int, rule: Callable[[np.ndarray], np.ndarray], horizon: int,
                  tail_bound: float = math.nan, label: str = "") -> "GradedVector":
        """Evaluate ``rule(states)`` on all states of degree < horizon."""
        b = basis(k, horizon)
        c = np.asarray(rule(b.states), dtype=complex).reshape(-1)
        return cls(k, c, horizon, rule=rule, tail_bound=tail_bound, label=label)

    # -- derived views
    @property
    def max_degree(self) -> float:
        if self.rule is not None:
            return math.inf
        nz = np.flatnonzero(self.coeffs)
        if nz.size == 0:
            return -1
        return int(basis(self.k, self.horizon).states[nz[-1]].sum())

    @property
    def entries(self) -> Dict[MultiIndex, complex]:
        b = basis(self.k, self.horizon)
        nz = np.flatnonzero(self.coeffs)
        return {tuple(int(v) for v in b.states[i]): complex(self.coeffs[i]) for i in nz}

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def padded(self, horizon: int) -> np.ndarray:
        """Coefficients on the basis of degree < horizon (zero padded or cut)."""
        size = graded_basis_size(self.k, horizon)
        if self.rule is not None and horizon > self.horizon:
            return self.extend(horizon).coeffs
        out = np.zeros(size, complex)
        m = min(size, self.coeffs.size)
        out[:m] = self.coeffs[:m]
        return out

    def extend(self, horizon: int) -> "GradedVector":
        if self.rule is None:
            raise ValueError("only rule-defined vectors can be extended")
        return GradedVector.from_rule(self.k, self.rule, horizon, self.tail_bound, self.label)

    def scaled(self, s: complex) -> "GradedVector":
        return replace(self, coeffs=self.coeffs * s, tail_bound=self.tail_bound * abs(s) ** 2)


def inner(u: GradedVector, v: GradedVector) -> complex:
    """<u, v>, conjugate-linear in the first slot."""
    if u.k != v.k:
        raise ModeMismatch("mode counts differ")
    h = max(u.horizon, v.horizon)
    return complex(np.vdot(u.padded(h), v.padded(h)))


def geometric_probe(k: int, horizon: int) -> GradedVector:
    """x_alpha proportional to 2^-|alpha|, normalised on the infinite basis.

    sum_alpha 4^-|alpha| = (4/3)^k, so the exact norm is known and the tail
    beyond the horizon is reported exactly.
    """
    norm2 = (4.0 / 3.0) ** k

    def rule(states):
        return 2.0 ** (-states.sum(axis=1).astype(float)) / math.sqrt(norm2)

    v = GradedVector.from_rule(k, rule, horizon, label="geometric")
    return replace(v, tail_bound=max(0.0, 1.0 - float(np.vdot(v.coeffs, v.coeffs).real)))


# -------------------------------------------------------------- operators


class GradedOperator:
    """Banded operator on the graded basis.

    Subclasses supply ``_columns(n)``: the exact matrix of the operator on
    states of degree < n, with rows over degree < n + band_order.
    """

    k: int = 1
    band_order: int = 0
    hermitian: bool = True
    positive: Optional[bool] = None
    name: str = ""

    def _columns(self, n: int) -> sp.csr_matrix:  # pragma: no cover - abstract
        raise NotImplementedError

    def columns(self, n: int) -> sp.csr_matrix:
        m = self._columns(n).tocsr()
        m.eliminate_zeros()
        return m

    def matrix_elements_real(self, n: int = 40) -> bool:
        m = self.columns(n)
        return bool(np.all(np.imag(m.data) == 0))

    def flagged(self, **changes) -> "GradedOperator":
        import copy

        other = copy.copy(self)
        for key, val in changes.items():
            setattr(other, key, val)
        return other

    # algebra --------------------------------------------------------
    def __add__(self, other: "GradedOperator") -> "GradedOperator":
        return SumOperator((self, other), (1.0, 1.0))

    def __sub__(self, other: "GradedOperator") -> "GradedOperator":
        return SumOperator((self, other), (1.0, -1.0))

    def __matmul__(self, other: "GradedOperator") -> "GradedOperator":
        return ProductOperator(self, other)

    def __rmul__(self, s: complex) -> "GradedOperator":
        return SumOperator((self,), (s,))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name or '?'}, k={self.k}, d={self.band_order})"


def _pad_rows(m: sp.spmatrix, rows: int) -> sp.csr_matrix:
    m = m.tocsr()
    if m.shape[0] == rows:
        return m
    if m.shape[0] > rows:
        return m[:rows]
    m = m.tocoo()
    return sp.csr_matrix((m.data, (m.row, m.col)), shape=(rows, m.shape[1]))


def tight_band(op: GradedOperator, n_sample: int) -> int:
    """Largest degree shift carried by a nonzero element on states < n_sample."""
    m = op.columns(n_sample).tocoo()
    if m.nnz == 0:
        return 0
    b = basis(op.k, n_sample + op.band_order)
    deg = b.states.sum(axis=1)
    scale = np.abs(m.data).max()
    keep = np.abs(m.data) > 1e-12 * scale
    if not keep.any():
        return 0
    return int(np.abs(deg[m.row[keep]] - deg[m.col[keep]]).max())


class MatrixRuleOperator(GradedOperator):
    """Operator defined by a column-block generator ``rule(n) -> matrix``."""

    def __init__(self, k: int, band_order: int, rule: Callable[[int], sp.spmatrix],
                 hermitian: bool = True, name: str = ""):
        self.k, self.band_order, self._rule = k, band_order, rule
        self.hermitian, self.name = hermitian, name
        self.positive = None

    def _columns(self, n: int) -> sp.csr_matrix:
        return self._rule(n)


class SumOperator(GradedOperator):
    def __init__(self, ops: Sequence[GradedOperator], weights: Sequence[complex]):
        ks = {o.k for o in ops}
        if len(ks) != 1:
            raise ModeMismatch("cannot combine operators with different mode counts")
        self.k = ks.pop()
        self.ops, self.weights = tuple(ops), tuple(weights)
        self.hermitian = all(o.hermitian for o in ops) and all(
            complex(w).imag == 0 for w in weights)
        self.positive = None
        self.name = " + ".join(f"{w}*{o.name}" for o, w in zip(ops, weights))
        self.band_order = max(o.band_order for o in ops)
        self.band_order = tight_band(self, 3 * self.band_order + 4)

    def _columns(self, n: int) -> sp.csr_matrix:
        d = max(o.band_order for o in self.ops)
        rows = graded_basis_size(self.k, n + d)
        total = None
        for o, w in zip(self.ops, self.weights):
            m = _pad_rows(o.columns(n), rows) * w
            total = m if total is None else total + m
        return _pad_rows(total, graded_basis_size(self.k, n + self.band_order)) \
            if self.band_order < d else total.tocsr()


class ProductOperator(GradedOperator):
    """A @ B, applied as B first."""

    def __init__(self, a: GradedOperator, b: GradedOperator):
        if a.k != b.k:
            raise ModeMismatch("cannot compose operators with different mode counts")
        self.k, self.a, self.b = a.k, a, b
        self.hermitian = False
        self.positive = None
        self.name = f"({a.name})({b.name})"
        self.band_order = a.band_order + b.band_order
        self.band_order = tight_band(self, 3 * self.band_order + 4)

    def _columns(self, n: int) -> sp.csr_matrix:
        inner_cols = self.b.columns(n)
        outer = self.a.columns(n + self.b.band_order)
        full = (outer @ inner_cols).tocsr()
        return _pad_rows(full, graded_basis_size(self.k, n + self.band_order))


def identity(k: int = 1) -> GradedOperator:
    def rule(n):
        return sp.identity(graded_basis_size(k, n), dtype=complex, format="csr")

    return MatrixRuleOperator(k, 0, rule, name="I")


def diagonal(values: Callable[[np.ndarray], np.ndarray], k: int = 1, name: str = "diag") -> GradedOperator:
    """Diagonal operator with entries ``values(states)``."""

    def rule(n):
        return sp.diags(np.asarray(values(basis(k, n).states), dtype=complex), format="csr")

    return MatrixRuleOperator(k, 0, rule, name=name)


def apply(op: GradedOperator, v: GradedVector) -> GradedVector:
    """Exact action on a finitely supported vector."""
    if op.k != v.k:
        raise ModeMismatch(f"operator has k={op.k}, vector has k={v.k}")
    if v.rule is not None:
        raise ValueError("apply needs a finitely supported vector; cut the rule first")
    n = v.horizon
    out = op.columns(n) @ v.coeffs
    return GradedVector(v.k, np.asarray(out).reshape(-1), n + op.band_order)


def truncate(op: GradedOperator, n: int) -> np.ndarray:
    """Dense compression P_n S P_n on the states of degree < n."""
    if n < 1:
        raise ValueError("truncation size must be >= 1")
    size = graded_basis_size(op.k, n)
    return op.columns(n)[:size].toarray()


# ----------------------------------------------------------------- ladder


@dataclass(frozen=True)
class ProjectionLadder:
    """Degree cutoffs n_1 < n_2 < ...; P_j projects onto degrees < n_j.

    Either an arithmetic rule ``n_j = offset + step * j`` or an explicit
    finite list of cutoffs.
    """

    step: int = 1
    offset: int = 0
    explicit: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.explicit is not None:
            c = self.explicit
            if len(c) == 0 or c[0] < 1 or any(b <= a for a, b in zip(c, c[1:])):
                raise ValueError("cutoffs must be strictly increasing positive integers")
        elif self.step < 1 or self.offset + self.step < 1:
            raise ValueError("ladder step must be >= 1 with a positive first cutoff")

    def cutoff(self, j: int) -> int:
        if j < 1:
            raise ValueError("levels start at j = 1")
        if self.explicit is not None:
            if j > len(self.explicit):
                raise IndexError(f"ladder only defines {len(self.explicit)} levels")
            return self.explicit[j - 1]
        return self.offset + self.step * j

    def cutoffs(self, J: int) -> np.ndarray:
        return np.array([self.cutoff(j) for j in range(1, J + 1)], dtype=np.int64)

    def min_gap(self, J: int = 50) -> int:
        if self.explicit is None:
            return self.step
        c = (0,) + self.explicit[:J]
        return min(b - a for a, b in zip(c, c[1:]))

    def coarsen(self, m: int) -> "ProjectionLadder":
        """Keep every m-th cutoff: n'_j = n_{m j}."""
        if m == 1:
            return self
        if self.explicit is not None:
            return ProjectionLadder(explicit=tuple(self.explicit[m - 1::m]))
        return ProjectionLadder(step=self.step * m, offset=self.offset)

    def project(self, v: GradedVector, j: int) -> np.ndarray:
        c = v.coeffs.copy()
        c[graded_basis_size(v.k, self.cutoff(j)):] = 0
        return c


def unit_ladder() -> ProjectionLadder:
    return ProjectionLadder(step=1)


# ------------------------------------------------------------ block norms


def _top_singular_squared(a: np.ndarray, seed: int, tol: float = 1e-10,
                          max_iter: int = 10_000) -> float:
    """Largest eigenvalue of the PSD matrix ``a`` by power iteration.

    Small matrices are first raised to a power 2^s by repeated squaring, which
    is the same power iteration with far fewer passes; the final estimate is
    the Rayleigh quotient of the original matrix.
    """
    dim = a.shape[0]
    if dim == 0:
        return 0.0
    scale = float(np.abs(a).max())
    if scale == 0.0:
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    if dim <= 256:
        powered = a / scale
        for _ in range(40):
            powered = powered @ powered
            nrm = np.abs(powered).max()
            if nrm == 0.0:
                break
            powered /= nrm
            w = powered @ v
            if np.linalg.norm(w) > 0:
                v = w / np.linalg.norm(w)
    lam_old = float(np.vdot(v, a @ v).real)
    for _ in range(max_iter):
        w = a @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam = float(np.vdot(v, a @ v).real)
        if abs(lam - lam_old) <= tol * max(abs(lam), 1e-300):
            return lam
        lam_old = lam
    return lam_old


def off_diagonal_block(matrix: sp.csr_matrix, k: int, n_j: int, d: int) -> sp.csr_matrix:
    """Rows of degree in [n_j, n_j + d), columns of degree in [n_j - d, n_j)."""
    b = basis(k, n_j + d)
    rows = b.degree_range(n_j, n_j + d)
    cols = b.degree_range(n_j - d, n_j)
    return matrix[rows, cols]


def block_norm(op: GradedOperator, ladder: ProjectionLadder, j: int, seed: int = 0,
               matrix: Optional[sp.csr_matrix] = None) -> float:
    """||P_j^perp S P_j||, the largest singular value of the off-diagonal block.

    Only columns within d degrees of the cutoff can leave the range of P_j,
    so the block is extracted from those columns alone (exactly).
    """
    n_j = ladder.cutoff(j)
    d = op.band_order
    if d == 0:
        return 0.0
    if matrix is None:
        matrix = op.columns(n_j)
    blk = off_diagonal_block(matrix, op.k, n_j, d).toarray()
    if blk.size == 0:
        return 0.0
    gram = blk.conj().T @ blk if blk.shape[1] <= blk.shape[0] else blk @ blk.conj().T
    return math.sqrt(max(_top_singular_squared(gram, seed + j), 0.0))


def block_norms(op: GradedOperator, ladder: ProjectionLadder, J: int, seed: int = 0) -> np.ndarray:
    """b_1..b_J from a single exact column block."""
    top = int(ladder.cutoff(J))
    matrix = op.columns(top)
    return np.array([block_norm(op, ladder, j, seed, matrix) for j in range(1, J + 1)])
