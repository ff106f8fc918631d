import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from betawave.lattice import (Lattice, LatticeError, MomentumMap, ParamGrid, TravelingField,
                              assert_traveling, evaluate, evaluate_many, is_even, is_odd,
                              lip_gamma_norm, load_field, parity, project_high, project_low,
                              save_field, sobolev_norm)

STD = MomentumMap.standard()
seeds = st.integers(0, 2**32 - 1)


def single_pair(ell, amp, K=4):
    ell = tuple(ell)
    neg = tuple(-x for x in ell)
    return TravelingField.from_coeffs({ell: amp, neg: np.conj(amp)}, K)


def rand_field(seed, K=4, decay=0.5):
    return TravelingField.random(np.random.default_rng(seed), K, decay=decay)


# sobolev_norm ---------------------------------------------------------------------------

def test_sobolev_zero():
    assert sobolev_norm(TravelingField.zeros(3), 4) == 0.0


@pytest.mark.parametrize("s", [0, 1])
def test_sobolev_single_pair(s):
    f = single_pair((1, 0), 1.0)
    assert f[(1, 0)] == 1 and STD.spatial_mode((1, 0)).tolist() == [-1, 0]
    assert sobolev_norm(f, s) == pytest.approx(np.sqrt(2), rel=1e-15)


def test_sobolev_weight_uses_max_bracket():
    f = single_pair((2, -1), 1.0)
    assert sobolev_norm(f, 1) == pytest.approx(np.sqrt(2) * 2, rel=1e-15)


# invariants --------------------------------------------------------------------------------

def test_reality_violation_rejected():
    with pytest.raises(LatticeError, match="reality"):
        TravelingField.from_coeffs({(1, 0): 1.0}, 3)


def test_zero_average_violation_rejected():
    lat = Lattice(2, STD)
    dense = np.zeros(lat.shape, complex)
    dense[2, 2] = 1.0
    with pytest.raises(LatticeError, match="zero-average"):
        TravelingField(dense, 2)


def test_nonstandard_momentum_kills_kernel_modes():
    m = MomentumMap(((1, 0), (1, 0), (0, 1)))
    lat = Lattice(1, m)
    # l = (1,-1,0) has pi^T(l) = 0 and must be masked out
    assert not lat.mask[lat.index((1, -1, 0))]
    assert lat.mask[lat.index((1, 0, 0))]


def test_rank_deficient_momentum_rejected():
    with pytest.raises(LatticeError):
        MomentumMap(((1, 0), (2, 0)))


@given(seeds)
def test_random_fields_are_traveling(seed):
    f = rand_field(seed)
    assert_traveling(f)
    g = f + f * 2.0 - f
    assert_traveling(g)


# projectors --------------------------------------------------------------------------------

@given(seeds, st.integers(1, 5))
def test_projectors_partition(seed, K):
    f = rand_field(seed)
    np.testing.assert_array_equal((project_low(f, K) + project_high(f, K)).flat, f.flat)


def test_project_low_identity_for_large_K():
    f = rand_field(3)
    np.testing.assert_array_equal(project_low(f, 4).flat, f.flat)


def test_project_low_removes_high_mode():
    f = single_pair((5, 0), 1.0, K=6)
    assert not np.any(project_low(f, 3).flat)


@given(seeds, st.integers(1, 4), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_smoothing_bounds(seed, K, s, a):
    f = rand_field(seed, K=5)
    assert sobolev_norm(project_high(f, K), s) <= K ** (-a) * sobolev_norm(f, s + a) * (1 + 1e-12)
    assert sobolev_norm(project_low(f, K), s + a) <= K ** a * sobolev_norm(f, s) * (1 + 1e-12)


# parity ------------------------------------------------------------------------------------

def test_parity_examples():
    assert parity(single_pair((1, 2), 1.0)) == "even"
    assert parity(single_pair((1, 2), 1j)) == "odd"
    mixed = single_pair((1, 2), 1.0) + single_pair((2, 1), 1j)
    assert parity(mixed) == "neither"
    assert is_odd(single_pair((1, 0), 1j)) and is_even(single_pair((1, 0), 1.0))


# evaluation --------------------------------------------------------------------------------

def test_evaluate_zero_field():
    assert evaluate(TravelingField.zeros(2), [0.3, 0.1], [1.0, 2.0]) == 0.0


def test_evaluate_cosine():
    ell = np.array([1, 2])
    f = single_pair(ell, 0.5)
    phi, x = np.array([0.7, -1.3]), np.array([2.1, 0.4])
    expected = np.cos(ell @ phi + STD.spatial_mode(ell) @ x)
    assert evaluate(f, phi, x) == pytest.approx(expected, abs=1e-14)


def test_translation_identity(rng):
    f = rand_field(7)
    for _ in range(100):
        phi, x, sig = rng.uniform(0, 2 * np.pi, (3, 2))
        lhs = evaluate(f, phi - STD.pi(sig), x)
        rhs = evaluate(f, phi, x + sig)
        assert lhs == pytest.approx(rhs, abs=1e-12 * np.abs(f.flat).sum())


def test_evaluate_many_matches_pointwise(rng):
    f = rand_field(8)
    P, X = rng.uniform(0, 6, (2, 20, 2))
    np.testing.assert_allclose(evaluate_many(f, P, X), [evaluate(f, p, x) for p, x in zip(P, X)],
                               atol=1e-12)


# Lipschitz norm ------------------------------------------------------------------------------

def test_lip_constant_field():
    f = rand_field(9)
    grid = ParamGrid.axis_pairs([[1.2, 0.5], [0.3, 1.4]], gamma=0.5)
    assert lip_gamma_norm(lambda w: f, grid, 3) == pytest.approx(sobolev_norm(f, 3), rel=1e-15)


def test_lip_linear_field():
    e = single_pair((1, 0), 1 / np.sqrt(2))
    grid = ParamGrid.axis_pairs([[1.2, 0.5]], h=1e-3, gamma=0.3)
    grid = ParamGrid(grid.samples, grid.pairs[:1], 0.3)
    parts = lip_gamma_norm(lambda w: e * w[0], grid, 2, return_parts=True)
    assert parts["lip"] == pytest.approx(1.0, rel=1e-9)
    assert parts["total"] == pytest.approx(parts["sup"] + 0.3, rel=1e-9)


def test_lip_gamma_zero_is_sup():
    grid = ParamGrid.axis_pairs([[1.2, 0.5]], gamma=0.0)
    e = single_pair((1, 1), 1.0)
    assert lip_gamma_norm(lambda w: e * w[1], grid, 1) == max(sobolev_norm(e * w[1], 1) for w in grid.samples)


def test_lip_degenerate_pair():
    grid = ParamGrid([[1.2, 0.5], [1.2, 0.5]], ((0, 1),))
    with pytest.raises(LatticeError, match="degenerate"):
        lip_gamma_norm(lambda w: rand_field(1), grid)


def test_paramgrid_rejects_outside_annulus():
    with pytest.raises(LatticeError):
        ParamGrid([[0.1, 0.1]])


# serialization -------------------------------------------------------------------------------

def test_json_roundtrip(tmp_path):
    f = rand_field(10)
    path = tmp_path / "f.json"
    save_field(path, f)
    g = load_field(path)
    np.testing.assert_array_equal(g.flat, f.flat)
    data = json.loads(path.read_text())
    assert set(data) >= {"nu", "wave_vectors", "K_trunc", "coeffs"}


def test_json_loader_rejects_bad_reality():
    data = single_pair((1, 0), 1.0).to_json()
    data["coeffs"] = [c for c in data["coeffs"] if c[0] == [1, 0]]
    with pytest.raises(LatticeError):
        TravelingField.from_json(data)
