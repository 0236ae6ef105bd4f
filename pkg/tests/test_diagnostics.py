import numpy as np
import pytest
from hypothesis import given, strategies as st

from offdiag.defect import solve_banded_defect, solve_tridiagonal_defect
from offdiag.diagnostics import (NotDefectVector, NotPositive, ShiftMismatch, build_report,
                                 check_basic_estimate, check_growth_chain,
                                 detect_smoothness_shift, local_seq, offdiag_norm_seq, quad_seq,
                                 restricted_block_norm, smooth_ladder, xi_seq)
from offdiag.graded import GradedVector, ProjectionLadder, geometric_probe, unit_ladder
from offdiag.jacobi import JacobiSpec, compile_jacobi
from offdiag.ncpoly import compile_poly, parse_ncpoly

Q = compile_poly(parse_ncpoly("q"))


def test_norm_sequence_of_q():
    assert np.allclose(offdiag_norm_seq(Q, unit_ladder(), 20), np.sqrt(np.arange(1, 21) / 2))


def test_local_sequence_of_basis_state():
    # q e_2 = sqrt(2/2) e_1 + sqrt(3/2) e_3 (zero based); only level 3 leaks it upward
    x = GradedVector.basis_state((2,))
    c = local_seq(Q, unit_ladder(), x, 5)
    assert np.allclose(c, [0, 0, 1.5, 0, 0])


def test_xi_sequence_of_geometric_probe():
    xi = xi_seq(unit_ladder(), geometric_probe(1, 40), 10)
    assert np.allclose(xi, 1 - 4.0 ** -np.arange(1, 11), atol=1e-15)


@given(st.lists(st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False),
                min_size=1, max_size=15))
def test_local_sequence_below_block_norm(coeffs):
    op = compile_poly(parse_ncpoly("p*q*p"))
    lad = smooth_ladder(op, unit_ladder())
    x = GradedVector.from_array(1, np.asarray(coeffs))
    J = 6
    c = local_seq(op, lad, x, J)
    b = offdiag_norm_seq(op, lad, J)
    xi = xi_seq(lad, x, J)
    assert np.all(c <= b ** 2 * xi * (1 + 1e-9) + 1e-12)


def test_quad_sequence_needs_positive_flag():
    op = compile_poly(parse_ncpoly("p^2 + q^4"))
    x = geometric_probe(1, 60)
    with pytest.raises(NotPositive):
        quad_seq(op, unit_ladder(), x, 5)
    pos = op.flagged(positive=True)
    lad = smooth_ladder(pos, unit_ladder())
    d = quad_seq(pos, lad, x, 10)
    c = local_seq(pos, lad, x, 10)
    assert np.all(d <= np.sqrt(c) * x.norm() + 1e-12)


@pytest.mark.parametrize("expr,shift", [("p^2 + q^2", 0), ("q", 1), ("p*q*p", 3), ("p^2 - q^4", 4)])
def test_shift_on_unit_ladder(expr, shift):
    op = compile_poly(parse_ncpoly(expr))
    assert detect_smoothness_shift(op, unit_ladder()) == shift
    if shift:
        assert detect_smoothness_shift(op, smooth_ladder(op, unit_ladder())) == 1


def test_shift_on_explicit_ladder(pqp):
    lad = ProjectionLadder(explicit=tuple(range(2, 400, 2)))
    assert detect_smoothness_shift(pqp, lad, levels=40) == 2


@pytest.mark.parametrize("which", ["pqp", "jacobi"])
def test_basic_estimate_on_defect_vectors(which, pqp, jacobi_n2):
    op = pqp if which == "pqp" else jacobi_n2
    lad = smooth_ladder(op, unit_ladder())
    sol = (solve_banded_defect(op, 1j, 2000).l2()[0] if which == "pqp"
           else solve_tridiagonal_defect(op.spec, 1j, 2000))
    for j in (1, 2, 5, 20, 100, 200):
        est = check_basic_estimate(op, lad, j, sol.vector, sol.residual_vector)
        assert est.holds
        assert est.identity_gap <= est.slack + 1e-10


def test_growth_chain_on_defect_vector(pqp):
    lad = smooth_ladder(pqp, unit_ladder())
    sol = solve_banded_defect(pqp, -1j, 2000).l2()[0]
    rep = check_growth_chain(pqp, lad, sol.vector, sol.residual_vector, 200)
    assert rep.holds and rep.strict_below_one
    assert rep.max_relative_slack < 1e-8


def test_growth_chain_refusals(pqp):
    sol = solve_banded_defect(pqp, 1j, 1000).l2()[0]
    with pytest.raises(ShiftMismatch):
        check_growth_chain(pqp, unit_ladder(), sol.vector, sol.residual_vector, 10)
    lad = smooth_ladder(pqp, unit_ladder())
    with pytest.raises(NotDefectVector):
        check_growth_chain(pqp, lad, GradedVector.basis_state((4,)), 0.0, 10)


def test_restricted_norm_is_bounded_by_block_norm(pqp):
    lad = smooth_ladder(pqp, unit_ladder())
    rng = np.random.default_rng(1)
    space = rng.normal(size=(lad.cutoff(5), 2)) + 0j
    full = offdiag_norm_seq(pqp, lad, 5)[-1]
    assert restricted_block_norm(pqp, lad, 5, space) <= full * (1 + 1e-9)


def test_report_csv_layout():
    op = compile_jacobi(JacobiSpec("0", "n"))
    rep = build_report(op, unit_ladder(), 4, geometric_probe(1, 10), residual=0.0)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "level,b,c,d,xi,slack"
    assert len(lines) == 5 and lines[1].split(",")[3] == ""
