"""Coefficient sequences n -> value and tridiagonal (Jacobi) operators."""
from __future__ import annotations

import ast
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Mapping, Optional, Union

import numpy as np
import scipy.sparse as sp

from .graded import MatrixRuleOperator


class SeqExprError(ValueError):
    pass


_FUNCS = {"sqrt": np.sqrt, "log": np.log, "exp": np.exp, "abs": np.abs}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power}


@dataclass(frozen=True)
class SeqExpr:
    """Expression in ``n`` (and optional named parameters) such as ``"n^alpha"``.

    Supports + - * / ^, sqrt, log, exp, abs, numeric literals and the
    imaginary unit ``1j``.
    """

    text: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        try:
            tree = ast.parse(self.text.replace("^", "**").replace("−", "-"), mode="eval")
        except SyntaxError as exc:
            raise SeqExprError(f"cannot parse sequence {self.text!r}: {exc.msg}") from None
        self._check(tree.body)
        object.__setattr__(self, "_tree", tree.body)
        object.__setattr__(self, "params", dict(self.params))

    def _check(self, node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left), self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            self._check(node.operand)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords:
            self._check(node.args[0])
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float, complex)):
            pass
        elif isinstance(node, ast.Name):
            pass
        else:
            raise SeqExprError(f"unsupported construct in {self.text!r}")

    def bind(self, **params: float) -> "SeqExpr":
        merged = dict(self.params)
        merged.update(params)
        return SeqExpr(self.text, merged)

    def free_names(self) -> set:
        names = {n.id for n in ast.walk(self._tree) if isinstance(n, ast.Name)}
        return names - set(_FUNCS) - {"n"} - set(self.params)

    def _eval(self, node, n):
        if isinstance(node, ast.BinOp):
            left, right = self._eval(node.left, n), self._eval(node.right, n)
            if isinstance(node.op, ast.Pow):
                left = np.asarray(left, dtype=float if np.isrealobj(left) else complex)
            return _BINOPS[type(node.op)](left, right)
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, n)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Call):
            return _FUNCS[node.func.id](self._eval(node.args[0], n))
        if isinstance(node, ast.Constant):
            return node.value
        if node.id == "n":
            return n
        if node.id in self.params:
            return self.params[node.id]
        raise SeqExprError(f"unbound name {node.id!r} in {self.text!r}")

    def __call__(self, n: np.ndarray) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        with np.errstate(all="ignore"):
            out = np.broadcast_to(self._eval(self._tree, n), n.shape).copy()
        bad = ~np.isfinite(out)
        if bad.any():
            raise SeqExprError(f"{self.text!r} is not finite at n = {int(n[bad][0])}")
        return out


Sequence_ = Union[SeqExpr, np.ndarray, str]


def _as_seq(s: Sequence_) -> Union[SeqExpr, np.ndarray]:
    if isinstance(s, str):
        return SeqExpr(s)
    if isinstance(s, SeqExpr):
        return s
    return np.asarray(s)


@dataclass(frozen=True)
class JacobiSpec:
    """Diagonal a_n (real) and off-diagonal b_n (complex), n >= 1.

    Arrays are read from index 1: ``a[0]`` is a_1.
    """

    a: Sequence_ = "0"
    b: Sequence_ = "1"
    length_hint: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "a", _as_seq(self.a))
        object.__setattr__(self, "b", _as_seq(self.b))

    def _values(self, seq, n_max: int, what: str) -> np.ndarray:
        if isinstance(seq, SeqExpr):
            return seq(np.arange(1, n_max + 1))
        if seq.size < n_max:
            raise SeqExprError(f"{what} array has {seq.size} entries, {n_max} needed")
        return seq[:n_max]

    def a_values(self, n_max: int) -> np.ndarray:
        a = self._values(self.a, n_max, "a")
        if np.iscomplexobj(a):
            if np.any(a.imag != 0):
                raise SeqExprError("diagonal entries a_n must be real")
            a = a.real
        return a.astype(float)

    def b_values(self, n_max: int) -> np.ndarray:
        return self._values(self.b, n_max, "b").astype(complex)

    def bind(self, **params) -> "JacobiSpec":
        a = self.a.bind(**params) if isinstance(self.a, SeqExpr) else self.a
        b = self.b.bind(**params) if isinstance(self.b, SeqExpr) else self.b
        return JacobiSpec(a, b, self.length_hint)


class JacobiOperator(MatrixRuleOperator):
    """S e_n = conj(b_{n-1}) e_{n-1} + a_n e_n + b_n e_{n+1}."""

    def __init__(self, spec: JacobiSpec, name: str = ""):
        self.spec = spec
        band = 1

        def rule(n: int) -> sp.csr_matrix:
            a = self.spec.a_values(n).astype(complex)
            b = self.spec.b_values(n)
            m = sp.diags([a, b, np.conj(b[: n - 1])], [0, -1, 1], shape=(n + 1, n), format="csr")
            return m

        super().__init__(1, band, rule, hermitian=True, name=name or "jacobi")
        # a purely diagonal sequence still reports band 1 only when some b_n != 0
        if not np.any(self.spec.b_values(64)):
            self.band_order = 0
            self._rule = lambda n: sp.diags(self.spec.a_values(n).astype(complex), format="csr")


def compile_jacobi(spec: JacobiSpec, name: str = "") -> JacobiOperator:
    return JacobiOperator(spec, name)


def jacobi_from_operator(op, n_max: int) -> JacobiSpec:
    """Read a_n, b_n off a k = 1 operator of band order <= 1."""
    if op.k != 1 or op.band_order > 1:
        raise ValueError("operator is not tridiagonal")
    m = op.columns(n_max)
    a = np.real(m.diagonal(0)[:n_max])
    b = m.diagonal(-1)[:n_max] if op.band_order == 1 else np.zeros(n_max, complex)
    return JacobiSpec(np.asarray(a), np.asarray(b), n_max)
