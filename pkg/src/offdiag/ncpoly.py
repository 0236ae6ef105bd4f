"""Noncommutative polynomials in canonical pairs p_i, q_i and their compilation.

Ladder convention per mode i::

    a_i |alpha> = sqrt(alpha_i) |alpha - e_i>
    a_i^+ |alpha> = sqrt(alpha_i + 1) |alpha + e_i>
    q_i = (a_i + a_i^+) / sqrt(2)
    p_i = (a_i - a_i^+) / (i sqrt(2))

With this choice p q - q p = (1/i) I and p^2 + q^2 = diag(2n + 1).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from itertools import product as iproduct
from typing import Dict, List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .graded import MatrixRuleOperator, basis, graded_basis_size

Generator = Tuple[str, int]          # ('p', 1), ('q', 2), ...
Word = Tuple[Generator, ...]

_SQRT_HALF = 1.0 / math.sqrt(2.0)
# coefficient of (lowering, raising) in each generator
_LADDER = {
    "q": (_SQRT_HALF, _SQRT_HALF),
    "p": (-1j * _SQRT_HALF, 1j * _SQRT_HALF),
}


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class NonSymmetric(ValueError):
    def __init__(self, offending: List[str]):
        super().__init__("polynomial is not formally symmetric; offending terms: "
                         + ", ".join(offending))
        self.offending = offending


@dataclass(frozen=True)
class NcPoly:
    """Canonical sum of coefficient * word; like words merged, zeros dropped."""

    k: int
    terms: Tuple[Tuple[complex, Word], ...]

    @classmethod
    def from_dict(cls, k: int, d: Dict[Word, complex]) -> "NcPoly":
        items = [(complex(c), w) for w, c in d.items() if c != 0]
        items.sort(key=lambda t: (len(t[1]), t[1]))
        return cls(k, tuple(items))

    def as_dict(self) -> Dict[Word, complex]:
        return {w: c for c, w in self.terms}

    @property
    def degree(self) -> int:
        return max((len(w) for _, w in self.terms), default=0)

    def __add__(self, other: "NcPoly") -> "NcPoly":
        return _combine(self, other, 1)

    def __sub__(self, other: "NcPoly") -> "NcPoly":
        return _combine(self, other, -1)

    def __mul__(self, other: "NcPoly") -> "NcPoly":
        if self.k != other.k:
            raise ValueError("mode counts differ")
        out: Dict[Word, complex] = {}
        for c1, w1 in self.terms:
            for c2, w2 in other.terms:
                out[w1 + w2] = out.get(w1 + w2, 0) + c1 * c2
        return NcPoly.from_dict(self.k, out)

    def scale(self, s: complex) -> "NcPoly":
        return NcPoly.from_dict(self.k, {w: c * s for c, w in self.terms})

    def __str__(self) -> str:
        return format_ncpoly(self)


def _combine(a: NcPoly, b: NcPoly, sign: int) -> NcPoly:
    if a.k != b.k:
        raise ValueError("mode counts differ")
    out = a.as_dict()
    for c, w in b.terms:
        out[w] = out.get(w, 0) + sign * c
    return NcPoly.from_dict(a.k, out)


def _one(k: int, c: complex = 1.0) -> NcPoly:
    return NcPoly.from_dict(k, {(): c})


# ------------------------------------------------------------------ parser

_TOKEN = re.compile(r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)(?P<imag>i(?![A-Za-z0-9]))?"
                    r"|(?P<gen>[pq])(?P<idx>\d*)|(?P<unit>i)(?![A-Za-z0-9])|(?P<op>[-+*^()]))")


def _tokens(text: str):
    text = text.replace("−", "-")
    pos = 0
    out = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[bad]!r}", bad)
        start = m.start() + len(m.group(0)) - len(m.group(0).lstrip())
        if m.group("num") is not None:
            val = float(m.group("num"))
            out.append(("num", 1j * val if m.group("imag") else val, start))
        elif m.group("gen") is not None:
            out.append(("gen", (m.group("gen"), m.group("idx")), start))
        elif m.group("unit") is not None:
            out.append(("num", 1j, start))
        else:
            out.append((m.group("op"), None, start))
        pos = m.end()
    out.append(("end", None, len(text)))
    return out


class _Parser:
    def __init__(self, text: str, k: int):
        self.toks = _tokens(text)
        self.i = 0
        self.k = k

    def peek(self):
        return self.toks[self.i]

    def take(self, kind=None):
        tok = self.toks[self.i]
        if kind is not None and tok[0] != kind:
            raise ParseError(f"expected {kind!r}, found {tok[0]!r}", tok[2])
        self.i += 1
        return tok

    def expr(self) -> NcPoly:
        sign = 1
        if self.peek()[0] in "+-":
            sign = -1 if self.take()[0] == "-" else 1
        acc = self.term().scale(sign)
        while self.peek()[0] in ("+", "-"):
            op = self.take()[0]
            t = self.term()
            acc = acc + t if op == "+" else acc - t
        return acc

    def term(self) -> NcPoly:
        acc = self.power()
        while self.peek()[0] == "*":
            self.take()
            acc = acc * self.power()
        return acc

    def power(self) -> NcPoly:
        base = self.atom()
        while self.peek()[0] == "^":
            self.take()
            tok = self.take()
            if tok[0] != "num" or isinstance(tok[1], complex) or tok[1] != int(tok[1]):
                raise ParseError("exponent must be a non-negative integer", tok[2])
            e = int(tok[1])
            acc = _one(self.k)
            for _ in range(e):
                acc = acc * base
            base = acc
        return base

    def atom(self) -> NcPoly:
        kind, val, pos = self.peek()
        if kind == "num":
            self.take()
            return _one(self.k, val)
        if kind == "gen":
            self.take()
            letter, idx = val
            if idx == "":
                if self.k != 1:
                    raise ParseError(f"generator {letter} needs a mode index when k={self.k}", pos)
                i = 1
            else:
                i = int(idx)
            if not 1 <= i <= self.k:
                raise ParseError(f"mode index {i} outside 1..{self.k}", pos)
            return NcPoly.from_dict(self.k, {((letter, i),): 1.0})
        if kind == "(":
            self.take()
            inner = self.expr()
            self.take(")")
            return inner
        raise ParseError(f"unexpected {kind!r}", pos)


def parse_ncpoly(text: str, k: int = 1) -> NcPoly:
    """Parse e.g. ``"p*q*p"``, ``"p^2 - q^4"``, ``"(0.5+1i)*p1*q2"``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    parser = _Parser(text, k)
    poly = parser.expr()
    tok = parser.peek()
    if tok[0] != "end":
        raise ParseError(f"unexpected {tok[0]!r}", tok[2])
    return poly


def _fmt_coeff(c: complex) -> str:
    return f"({c.real!r}{'+' if c.imag >= 0 else '-'}{abs(c.imag)!r}i)"


def format_ncpoly(poly: NcPoly) -> str:
    """Print in a form that parses back to the identical canonical poly."""
    if not poly.terms:
        return "0"
    parts = []
    for c, w in poly.terms:
        gens = [f"{g}{i}" if poly.k > 1 else g for g, i in w]
        parts.append("*".join([_fmt_coeff(c)] + gens))
    return " + ".join(parts)


# ---------------------------------------------------------------- symmetry


def formal_adjoint(poly: NcPoly) -> NcPoly:
    """Reverse each word and conjugate its coefficient (p_i, q_i selfadjoint)."""
    return NcPoly.from_dict(poly.k, {w[::-1]: c.conjugate() for c, w in poly.terms})


def is_symmetric(poly: NcPoly) -> bool:
    return formal_adjoint(poly) == poly


def _asymmetric_terms(poly: NcPoly) -> List[str]:
    adj = formal_adjoint(poly).as_dict()
    mine = poly.as_dict()
    bad = []
    for w in sorted(set(adj) | set(mine), key=lambda w: (len(w), w)):
        if adj.get(w, 0) != mine.get(w, 0):
            bad.append(format_ncpoly(NcPoly.from_dict(poly.k, {w: mine.get(w, 0) or adj[w]})))
    return bad


# ----------------------------------------------------------------- compile


def _word_paths(word: Word):
    """Expand a word into (coefficient, steps) where steps are (mode, +/-1)."""
    choices = []
    for letter, mode in word:
        lo, hi = _LADDER[letter]
        choices.append(((lo, mode - 1, -1), (hi, mode - 1, +1)))
    for combo in iproduct(*choices):
        coef = 1.0 + 0j
        for c, _, _ in combo:
            coef *= c
        yield coef, tuple((m, s) for _, m, s in combo)


def _path_action(states: np.ndarray, steps) -> Tuple[np.ndarray, np.ndarray]:
    """Apply ladder steps right to left; returns (factor, out_states)."""
    st = states.copy()
    fac = np.ones(st.shape[0])
    for mode, s in reversed(steps):
        col = st[:, mode]
        if s < 0:
            fac *= np.sqrt(np.maximum(col, 0))
            col -= 1
        else:
            fac *= np.sqrt(col + 1)
            col += 1
        dead = col < 0
        fac[dead] = 0.0
        col[dead] = 0
    return fac, st


def _group_paths(poly: NcPoly):
    groups: Dict[Tuple[int, ...], List] = {}
    for c, w in poly.terms:
        for pc, steps in _word_paths(w):
            shift = [0] * poly.k
            for m, s in steps:
                shift[m] += s
            groups.setdefault(tuple(shift), []).append((c * pc, steps))
    return groups


def _sample_states(k: int, lo: int, hi: int) -> np.ndarray:
    b = basis(k, hi)
    return b.states[b.degree_range(lo, hi)]


def _group_is_zero(k: int, paths, length: int) -> bool:
    states = _sample_states(k, 0, 2 * length + 4)
    total = np.zeros(states.shape[0], complex)
    scale = 0.0
    for c, steps in paths:
        fac, _ = _path_action(states, steps)
        total += c * fac
        scale = max(scale, float(np.abs(c * fac).max(initial=0.0)))
    return scale == 0.0 or float(np.abs(total).max()) <= 1e-12 * scale


def compile_poly(poly: NcPoly, force: bool = False, name: str = ""):
    """Exact banded operator for ``poly``.

    Ladder paths are grouped by net per-mode shift; groups that cancel
    identically are dropped, so the band order is tight.
    """
    symmetric = is_symmetric(poly)
    if not symmetric and not force:
        raise NonSymmetric(_asymmetric_terms(poly))
    k = poly.k
    groups = {s: paths for s, paths in _group_paths(poly).items()
              if not _group_is_zero(k, paths, poly.degree)}
    band = max((abs(sum(s)) for s in groups), default=0)
    path_list = [p for paths in groups.values() for p in paths]

    def rule(n: int) -> sp.csr_matrix:
        cols = basis(k, n)
        rows_basis = basis(k, n + band)
        r_all, c_all, v_all = [], [], []
        col_idx = np.arange(len(cols))
        for c, steps in path_list:
            fac, out = _path_action(cols.states, steps)
            live = fac != 0
            if not live.any():
                continue
            r_all.append(rows_basis.index(out[live]))
            c_all.append(col_idx[live])
            v_all.append(c * fac[live])
        shape = (graded_basis_size(k, n + band), len(cols))
        if not r_all:
            return sp.csr_matrix(shape, dtype=complex)
        m = sp.coo_matrix((np.concatenate(v_all), (np.concatenate(r_all), np.concatenate(c_all))),
                          shape=shape).tocsr()
        m.sum_duplicates()
        return m

    return MatrixRuleOperator(k, band, rule, hermitian=symmetric, name=name or format_ncpoly(poly))


def generator_operator(letter: str, mode: int = 1, k: int = 1):
    return compile_poly(NcPoly.from_dict(k, {((letter, mode),): 1.0}), name=f"{letter}{mode}")
