import numpy as np
import pytest

from betawave.lattice import TravelingField, evaluate_many
from betawave.model import ProblemConfig
from betawave.nashmoser import nash_moser_solve
from betawave.validate import (NOT_APPLICABLE, CFLError, GridSnapshot, SpectralGrid, field_spectrum,
                               snapshot_of, stability_probe, timestep, validate_solution)

OMEGA = np.array([0.845, 1.728])


def _random_snapshot(n=24, seed=0, amp=1.0):
    g = SpectralGrid(n)
    rng = np.random.default_rng(seed)
    vh = np.zeros((n, n), complex)
    for j in [(1, 0), (0, 1), (1, 1), (2, -1), (1, 2)]:
        c = amp * (rng.standard_normal() + 1j * rng.standard_normal())
        i = g.index(np.array(j))
        k = g.index(-np.array(j))
        vh[i] += c
        vh[k] += np.conj(c)
    return GridSnapshot(0.0, vh, g)


def test_zero_stays_zero():
    cfg = ProblemConfig()
    s = GridSnapshot(0.0, np.zeros((12, 12), complex), SpectralGrid(12))
    out = timestep(s, cfg, OMEGA, 1e-3, 1e-5)
    assert np.max(np.abs(out[-1].spec)) == 0.0


def test_single_mode_linear_evolution():
    # B[v].grad v vanishes on one Fourier pair, so the linear rotation is exact
    cfg = ProblemConfig()
    g = SpectralGrid(16)
    x1, x2 = g.x1, g.x2
    v = np.cos(2 * x1 + x2)
    s = GridSnapshot.from_values(v)
    T = 0.7
    out = timestep(s, cfg, OMEGA, T, 1e-3, check_cfl=False)[-1]
    # tL acts on the pair as i j1/|j|^2, so the profile translates in phase
    j = np.array([2, 1])
    shift = cfg.beta_rot * j[0] / (j @ j) * T
    exact = np.cos(2 * x1 + x2 - shift)
    assert np.max(np.abs(out.values - exact)) <= 1e-8


def test_rk4_order():
    cfg = ProblemConfig(lam=2.0)
    s = _random_snapshot()
    T = 0.4
    ref = timestep(s, cfg, OMEGA, T, T / 256, check_cfl=False)[-1].spec
    errs = [np.linalg.norm(timestep(s, cfg, OMEGA, T, T / m, check_cfl=False)[-1].spec - ref)
            for m in (16, 32)]
    print(f"rk4 halving ratio {errs[0] / errs[1]:.2f}")
    assert errs[0] / errs[1] >= 14


def test_grid_matches_pointwise():
    cfg = ProblemConfig()
    f = TravelingField.random(np.random.default_rng(3), 4)
    g = SpectralGrid.for_lattice(4)
    t = 0.0123
    vals = g.to_grid(field_spectrum(f, g, t, cfg.lam, OMEGA))
    rng = np.random.default_rng(4)
    idx = rng.integers(0, g.n, size=(100, 2))
    xs = np.stack([g.x1[idx[:, 0], idx[:, 1]], g.x2[idx[:, 0], idx[:, 1]]], axis=1)
    phis = np.tile(cfg.lam * t * OMEGA, (100, 1))
    direct = evaluate_many(f, phis, xs)
    assert np.max(np.abs(vals[idx[:, 0], idx[:, 1]] - direct)) <= 1e-10 * np.abs(f.flat).sum()


def test_roundtrip():
    s = _random_snapshot()
    assert s.roundtrip_error() <= 1e-12


def test_cfl_violation():
    cfg = ProblemConfig()
    s = _random_snapshot(amp=50.0)
    with pytest.raises(CFLError, match="CFL"):
        timestep(s, cfg, OMEGA, 1e-2, 1e-2)


def test_dealias_share_of_smooth_field():
    s = _random_snapshot()
    assert s.grid.high_energy_share(s.spec) == 0.0


def test_bad_dt():
    with pytest.raises(ValueError):
        timestep(_random_snapshot(), ProblemConfig(), OMEGA, 1.0, 0.0)


def test_snapshot_forcing_drives_zero_state():
    cfg = ProblemConfig()
    f = TravelingField.zeros(cfg.K_trunc)
    s = snapshot_of(f, cfg, OMEGA)
    out = timestep(s, cfg, OMEGA, 1e-4, 1e-6, nonlinear=False, check_cfl=False)[-1]
    assert np.linalg.norm(out.spec) > 0


@pytest.fixture(scope="module")
def solved():
    cfg = ProblemConfig()
    return cfg, nash_moser_solve(cfg, OMEGA)


def test_validate_solution_within_proxy(solved):
    cfg, run = solved
    rep = validate_solution(run.w, cfg, OMEGA)
    s = rep.summary()
    print(f"defect {s['max_defect']:.3g} rho {s['rho']:.3g} ratio {s['ratio']:.3g}")
    assert rep.passed and s["ratio"] <= 10
    assert not s["dealias_flag"]
    assert len(rep.rows()) == 11


def test_probe_at_zero_is_isometric():
    cfg = ProblemConfig()
    w = TravelingField.zeros(cfg.K_trunc)
    r = stability_probe(w, cfg, OMEGA, reversible=True)
    assert r["status"] == "ok" and r["spectral_ok"]
    assert abs(r["sup_ratio"] - 1) <= 1e-8


def test_probe_not_applicable():
    cfg = ProblemConfig(forcing_even=False)
    r = stability_probe(TravelingField.zeros(cfg.K_trunc), cfg, OMEGA)
    assert r == {"status": NOT_APPLICABLE}
