import numpy as np
import pytest
from hypothesis import given, strategies as st

from betawave.lattice import Lattice, LatticeError, MomentumMap, TravelingField, sobolev_norm
from betawave.model import multiplier_tL
from betawave.opalg import (DecayIndex, LatticeOperator, SmallnessError, compose, decay_norm,
                            diag_part, exp_op, expm_series, multiplication_operator, op_project,
                            phi_average_is_diagonal, random_operator, structure_check)

STD = MomentumMap.standard()
LAT = Lattice(3, STD)
seeds = st.integers(0, 2**32 - 1)
S0 = 3.0


def rop(seed, scale=1.0, order=0.0, lat=LAT, density=1.0):
    return random_operator(np.random.default_rng(seed), lat, decay=1.0, scale=scale, order=order,
                           density=density)


def fitted(lhs, rhs):
    lhs, rhs = np.asarray(lhs), np.asarray(rhs)
    return float(np.max(lhs / rhs))


# decay norm -----------------------------------------------------------------------------

@pytest.mark.parametrize("s", [0.0, 2.0, 7.0])
def test_identity_norm(s):
    assert decay_norm(LatticeOperator.identity(LAT), DecayIndex(0, s)) == pytest.approx(1.0)


def test_tL_order_minus_one():
    A = LatticeOperator.from_symbol(multiplier_tL, Lattice(6, STD))
    assert decay_norm(A, DecayIndex(-1, 7)) <= 1.0


def test_inverse_laplacian_order_minus_two():
    A = LatticeOperator.from_symbol(lambda j: 1.0 / (j @ j), Lattice(6, STD))
    assert decay_norm(A, DecayIndex(-2, 7)) <= 1.0


def test_decay_norm_hand_value():
    # single entry at (l, l') = ((1,0), (0,0)+...) : column of (0,1), row (1,1)
    A = np.zeros((LAT.size, LAT.size), complex)
    A[LAT.index((1, 1)), LAT.index((0, 1))] = 2.0
    # <l-l', j-j'> = max(1, 1, 1) = 1, <j'> = 1
    assert decay_norm(LatticeOperator(A, LAT), DecayIndex(0, 5)) == pytest.approx(2.0)
    A[LAT.index((3, 1)), LAT.index((0, 1))] = 1.0
    # second row at distance 3: sqrt(4 + 3^(2s))
    assert decay_norm(LatticeOperator(A, LAT), DecayIndex(0, 1)) == pytest.approx(np.sqrt(4 + 9))


@given(seeds, st.floats(-3, 3), st.floats(0, 3), st.floats(0, 5), st.floats(0, 3))
def test_decay_norm_monotone(seed, m, dm, s, ds):
    A = rop(seed)
    assert decay_norm(A, DecayIndex(m + dm, s)) <= decay_norm(A, DecayIndex(m, s)) * (1 + 1e-12)
    assert decay_norm(A, DecayIndex(m, s)) <= decay_norm(A, DecayIndex(m, s + ds)) * (1 + 1e-12)


# composition -------------------------------------------------------------------------------

def test_compose_identity_and_diagonals(rng):
    A = rop(1)
    np.testing.assert_array_equal(compose(A, LatticeOperator.identity(LAT)).entries, A.entries)
    a, b = rng.standard_normal((2, LAT.size))
    D = compose(LatticeOperator.diagonal(a, LAT), LatticeOperator.diagonal(b, LAT))
    np.testing.assert_allclose(D.entries, LatticeOperator.diagonal(a * b, LAT).entries)


def test_compose_dimension_mismatch():
    with pytest.raises(LatticeError, match="dimension mismatch"):
        compose(rop(1), rop(1, lat=Lattice(2, STD)))


def test_composition_tame_constant():
    """|AB|_{m+m',s} <= C (|A|_{m,s}|B|_{m',s0+|m|} + |A|_{m,s0}|B|_{m',s+|m|})."""
    m, mp, s = -1.0, 0.0, 5.0
    lhs, rhs = [], []
    for seed in range(100):
        A, B = rop(seed, order=m, density=0.4), rop(seed + 1000, order=mp, density=0.4)
        lhs.append(decay_norm(compose(A, B), DecayIndex(m + mp, s)))
        rhs.append(decay_norm(A, DecayIndex(m, s)) * decay_norm(B, DecayIndex(mp, S0 + abs(m)))
                   + decay_norm(A, DecayIndex(m, S0)) * decay_norm(B, DecayIndex(mp, s + abs(m))))
    C_fit = fitted(lhs[:50], rhs[:50])
    C_check = fitted(lhs[50:], rhs[50:])
    print(f"composition tame constant: fit {C_fit:.3g}, held-out {C_check:.3g}")
    assert 0 < C_fit < 10 and C_check <= 1.5 * C_fit


def test_power_bounds():
    """|A^n|_{0,s0} <= C^(n-1) |A|^n with C fitted at n = 2."""
    idx = DecayIndex(0.0, S0)
    for seed in range(20):
        A = rop(seed, scale=0.05)
        a = decay_norm(A, idx)
        C = decay_norm(compose(A, A), idx) / a ** 2
        P = A
        for n in range(2, 7):
            P = compose(P, A) if n > 2 else compose(A, A)
            assert decay_norm(P, idx) <= (1.05 * C) ** (n - 1) * a ** n


def test_apply_tame_bound():
    s = 5.0
    lhs, rhs = [], []
    for seed in range(60):
        A = rop(seed)
        u = TravelingField.random(np.random.default_rng(seed + 7), 3, decay=0.7)
        lhs.append(sobolev_norm(A.apply(u), s))
        rhs.append(decay_norm(A, DecayIndex(0, s)) * sobolev_norm(u, S0)
                   + decay_norm(A, DecayIndex(0, S0)) * sobolev_norm(u, s))
    C_fit, C_check = fitted(lhs[:30], rhs[:30]), fitted(lhs[30:], rhs[30:])
    print(f"action tame constant: fit {C_fit:.3g}, held-out {C_check:.3g}")
    assert C_fit < 10 and C_check <= 1.5 * C_fit


# structure ---------------------------------------------------------------------------------

def test_structure_identity():
    assert structure_check(LatticeOperator.identity(LAT)) == {
        "real": True, "reversible": False, "reversibility_preserving": True}


def test_structure_i_tL():
    A = LatticeOperator.from_symbol(lambda j: 1j * multiplier_tL(j), LAT)
    st_ = structure_check(A)
    assert st_["real"] and st_["reversible"]


def test_structure_odd_multiplication():
    a = TravelingField.from_coeffs({(1, 2): 1j, (-1, -2): -1j, (0, 1): 0.3j, (0, -1): -0.3j}, 3)
    st_ = structure_check(multiplication_operator(a))
    assert st_["real"] and st_["reversible"]


@given(seeds)
def test_rp_times_reversible_is_reversible(seed):
    rng = np.random.default_rng(seed)
    even = TravelingField.random(rng, 3)
    even = TravelingField.from_flat(0.5 * (even.flat + even.flat[LAT.neg]), 3, STD)
    odd = TravelingField.random(rng, 3)
    odd = TravelingField.from_flat(0.5 * (odd.flat - odd.flat[LAT.neg]), 3, STD)
    A, B = multiplication_operator(even), multiplication_operator(odd)
    assert structure_check(A)["reversibility_preserving"] and structure_check(B)["reversible"]
    assert structure_check(compose(A, B))["reversible"]


# diagonal part and averages ------------------------------------------------------------------

def test_diag_part_and_predicate():
    D = LatticeOperator.diagonal(np.arange(LAT.size), LAT)
    np.testing.assert_array_equal(diag_part(D).entries, D.entries)
    assert phi_average_is_diagonal(D)
    a = TravelingField.random(np.random.default_rng(2), 3)
    assert phi_average_is_diagonal(multiplication_operator(a))


def test_generic_ambient_average_not_diagonal():
    blocks = {((0, 0), (1, 0), (0, 1)): 1.0, ((1, 0), (-1, 0), (0, 0)): 0.5}
    A = LatticeOperator.from_ambient_blocks(blocks, LAT)
    assert not A.is_restriction_of_mp
    assert not phi_average_is_diagonal(A)


# projection ---------------------------------------------------------------------------------

def test_op_project_edges():
    A = rop(3)
    low, high = op_project(A, 4 * LAT.K)
    np.testing.assert_array_equal(low.entries, A.entries)
    assert not np.any(high.entries)
    low0, _ = op_project(A, 0)
    off = low0.entries - np.diag(np.diag(low0.entries))
    assert not np.any(off)


@given(seeds, st.integers(1, 5), st.floats(0, 3), st.floats(0, 3))
def test_op_project_smoothing(seed, N, s, a):
    A = rop(seed)
    _, high = op_project(A, N)
    assert decay_norm(high, DecayIndex(0, s)) <= N ** (-a) * decay_norm(A, DecayIndex(0, s + a)) * (1 + 1e-12)


# exponentials ------------------------------------------------------------------------------

def test_exp_zero():
    np.testing.assert_array_equal(exp_op(LatticeOperator.zeros(LAT)).entries,
                                  LatticeOperator.identity(LAT).entries)


def test_exp_nilpotent():
    X = np.zeros((LAT.size, LAT.size), complex)
    X[LAT.index((1, 0)), LAT.index((0, 1))] = 0.01
    E = exp_op(LatticeOperator(X, LAT))
    np.testing.assert_allclose(E.entries, LatticeOperator.identity(LAT).entries + X, atol=1e-16)


@given(seeds)
def test_exp_inverse(seed):
    tol = 1e-14
    X = rop(seed, scale=1e-3)
    P = compose(exp_op(X, tol=tol, delta=None), exp_op(-X, tol=tol, delta=None))
    assert np.linalg.norm(P.entries - LatticeOperator.identity(LAT).entries) <= 10 * tol * np.sqrt(LAT.size)


def test_exp_smallness_errors():
    X = rop(0, scale=10.0)
    with pytest.raises(SmallnessError, match="smallness violated"):
        exp_op(X, delta=0.1)
    with pytest.raises(SmallnessError, match="smallness violated"):
        expm_series(X.entries, max_terms=5)


def test_operator_json_roundtrip():
    A = rop(4, density=0.2)
    B = LatticeOperator.from_json(A.to_json())
    np.testing.assert_array_equal(A.entries, B.entries)
