"""Non-resonance predicates and Monte-Carlo measure of excluded frequencies.

Every predicate is tested on the finite box 0 < |l|_inf <= Lmax.  Functions
accept one frequency (shape (nu,)) or a stack of samples (shape (n, nu)).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .lattice import Lattice, MomentumMap
from .model import ProblemConfig, tL_diag

KINDS = ("DC", "OmegaGamma", "Melnikov1", "Melnikov2")


class ResonanceError(ArithmeticError):
    """A divisor fell below its certified floor."""

    def __init__(self, message: str, where=None):
        super().__init__(message)
        self.where = where


def _samples(omega) -> tuple[np.ndarray, bool]:
    arr = np.asarray(omega, float)
    single = arr.ndim == 1
    return np.atleast_2d(arr), single


def _box(Lmax: int, momentum: MomentumMap) -> tuple[Lattice, np.ndarray]:
    lat = Lattice(int(Lmax), momentum)
    keep = lat.l_sup > 0
    return lat, keep


def _weights(lat: Lattice, tau: float) -> np.ndarray:
    return np.maximum(1, lat.l_sup).astype(float) ** (-tau)


def _ret(ok: np.ndarray, single: bool):
    return bool(ok[0]) if single else ok


def dc_margins(omega, gamma: float, tau: float, Lmax: int,
               momentum: MomentumMap | None = None) -> np.ndarray:
    """(n, modes) array of |omega.l| - gamma <l>^-tau over 0<|l|<=Lmax."""
    momentum = momentum or MomentumMap.standard()
    S, _ = _samples(omega)
    lat, keep = _box(Lmax, momentum)
    modes = lat.modes[keep]
    return np.abs(S @ modes.T) - gamma * _weights(lat, tau)[keep][None, :]


def check_dc(omega, gamma: float, tau: float, Lmax: int, momentum: MomentumMap | None = None):
    if gamma == 0:
        warnings.warn("degenerate Diophantine test: gamma = 0 passes vacuously", stacklevel=2)
    S, single = _samples(omega)
    ok = np.all(dc_margins(S, gamma, tau, Lmax, momentum) >= 0, axis=1)
    return _ret(ok, single)


def dc_violation(omega, gamma: float, tau: float, Lmax: int,
                 momentum: MomentumMap | None = None) -> tuple[int, ...] | None:
    momentum = momentum or MomentumMap.standard()
    lat, keep = _box(Lmax, momentum)
    marg = dc_margins(omega, gamma, tau, Lmax, momentum)[0]
    bad = np.flatnonzero(marg < 0)
    if not bad.size:
        return None
    i = bad[np.argmin(marg[bad])]
    return tuple(int(x) for x in lat.modes[keep][i])


def omega_gamma_margins(omega, cfg: ProblemConfig, Lmax: int, gamma: float | None = None,
                        beta: float | None = None) -> np.ndarray:
    S, _ = _samples(omega)
    gamma = cfg.gamma if gamma is None else gamma
    beta = cfg.beta_rot if beta is None else beta
    lat, keep = _box(Lmax, cfg.momentum)
    modes = lat.modes[keep]
    d = cfg.lam * (S @ modes.T) + beta * tL_diag(lat)[keep][None, :]
    return np.abs(d) - cfg.lam * gamma * _weights(lat, cfg.tau)[keep][None, :]


def check_omega_gamma(omega, cfg: ProblemConfig, Lmax: int | None = None,
                      gamma: float | None = None, beta: float | None = None):
    Lmax = cfg.K_trunc if Lmax is None else Lmax
    S, single = _samples(omega)
    ok = np.all(omega_gamma_margins(S, cfg, Lmax, gamma, beta) >= 0, axis=1)
    return _ret(ok, single)


def omega_gamma_violation(omega, cfg: ProblemConfig, Lmax: int | None = None,
                          gamma: float | None = None) -> tuple | None:
    Lmax = cfg.K_trunc if Lmax is None else Lmax
    lat, keep = _box(Lmax, cfg.momentum)
    marg = omega_gamma_margins(omega, cfg, Lmax, gamma)[0]
    bad = np.flatnonzero(marg < 0)
    if not bad.size:
        return None
    i = bad[np.argmin(marg[bad])]
    ell = lat.modes[keep][i]
    return tuple(int(x) for x in ell), tuple(int(x) for x in lat.j[keep][i])


def admissible(omega, cfg: ProblemConfig, Lmax: int | None = None):
    """DC(gamma, tau) and Omega_gamma on the active box."""
    Lmax = cfg.K_trunc if Lmax is None else Lmax
    S, single = _samples(omega)
    ok = (np.all(dc_margins(S, cfg.gamma, cfg.tau, Lmax, cfg.momentum) >= 0, axis=1)
          & np.all(omega_gamma_margins(S, cfg, Lmax) >= 0, axis=1))
    return _ret(ok, single)


# Melnikov conditions ----------------------------------------------------------

def mu_array(mu: Mapping, lat: Lattice) -> np.ndarray:
    """Eigenvalue table j -> mu(j) laid out over the flat lattice."""
    out = np.zeros(lat.size, complex)
    for i in np.flatnonzero(lat.mask):
        key = tuple(int(x) for x in lat.j[i])
        if key not in mu:
            raise KeyError(f"missing eigenvalue for j={key}")
        out[i] = mu[key]
    return out


def mu_table(values: np.ndarray, lat: Lattice) -> dict[tuple[int, int], complex]:
    return {tuple(int(x) for x in lat.j[i]): complex(values[i]) for i in np.flatnonzero(lat.mask)}


def _pairs(lat: Lattice, Lmax: int) -> tuple[np.ndarray, np.ndarray]:
    m = np.flatnonzero(lat.mask)
    a, b = np.meshgrid(m, m, indexing="ij")
    a, b = a.ravel(), b.ravel()
    k = np.abs(lat.modes[a] - lat.modes[b]).max(axis=1)
    keep = (k > 0) & (k <= Lmax)
    return a[keep], b[keep]


def melnikov2_margins(omega, mu: Mapping | np.ndarray, cfg: ProblemConfig, Lmax: int,
                      gamma_p: float, lat: Lattice | None = None):
    """Margins of |i lam omega.k + mu(j) - mu(j')| >= lam gamma' / (<k>^tau |j'|^tau).

    Pairs run over lattice entries (l, l') with k = l - l', j = j(l), j' = j(l').
    Returns (margins of shape (n, pairs), row index, column index).
    """
    lat = lat or cfg.lattice
    S, _ = _samples(omega)
    mu_v = mu if isinstance(mu, np.ndarray) else mu_array(mu, lat)
    a, b = _pairs(lat, Lmax)
    k = lat.modes[a] - lat.modes[b]
    ksup = np.maximum(1, np.abs(k).max(axis=1)).astype(float)
    jp = np.sqrt(lat.j_sq[b].astype(float))
    floor = cfg.lam * gamma_p / (ksup ** cfg.tau * jp ** cfg.tau)
    out = np.empty((len(S), len(a)))
    for n, w in enumerate(S):
        d = 1j * cfg.lam * (k @ w) + mu_v[a] - mu_v[b]
        out[n] = np.abs(d) - floor
    return out, a, b


def check_melnikov2(omega, mu, cfg: ProblemConfig, Lmax: int, gamma_p: float,
                    lat: Lattice | None = None):
    S, single = _samples(omega)
    marg, _, _ = melnikov2_margins(S, mu, cfg, Lmax, gamma_p, lat)
    return _ret(np.all(marg >= 0, axis=1), single)


def melnikov2_violation(omega, mu, cfg: ProblemConfig, Lmax: int, gamma_p: float,
                        lat: Lattice | None = None):
    lat = lat or cfg.lattice
    marg, a, b = melnikov2_margins(omega, mu, cfg, Lmax, gamma_p, lat)
    bad = np.flatnonzero(marg[0] < 0)
    if not bad.size:
        return None
    i = bad[np.argmin(marg[0][bad])]
    k = lat.modes[a[i]] - lat.modes[b[i]]
    return (tuple(int(x) for x in k), tuple(int(x) for x in lat.j[a[i]]),
            tuple(int(x) for x in lat.j[b[i]]))


def melnikov1_margins(omega, mu, cfg: ProblemConfig, Lmax: int, gamma_p: float,
                      lat: Lattice | None = None):
    """Margins of |i lam omega.l + mu(j(l))| >= 2 lam gamma' <l>^-tau."""
    lat = lat or cfg.lattice
    S, _ = _samples(omega)
    mu_v = mu if isinstance(mu, np.ndarray) else mu_array(mu, lat)
    idx = np.flatnonzero(lat.mask & (lat.l_sup <= Lmax) & (lat.l_sup > 0))
    modes = lat.modes[idx]
    floor = 2 * cfg.lam * gamma_p * np.maximum(1, lat.l_sup[idx]).astype(float) ** (-cfg.tau)
    d = 1j * cfg.lam * (S @ modes.T) + mu_v[idx][None, :]
    return np.abs(d) - floor[None, :], idx


def check_melnikov1(omega, mu, cfg: ProblemConfig, Lmax: int, gamma_p: float,
                    lat: Lattice | None = None):
    S, single = _samples(omega)
    marg, _ = melnikov1_margins(S, mu, cfg, Lmax, gamma_p, lat)
    return _ret(np.all(marg >= 0, axis=1), single)


def melnikov1_violation(omega, mu, cfg: ProblemConfig, Lmax: int, gamma_p: float,
                        lat: Lattice | None = None):
    lat = lat or cfg.lattice
    marg, idx = melnikov1_margins(omega, mu, cfg, Lmax, gamma_p, lat)
    bad = np.flatnonzero(marg[0] < 0)
    if not bad.size:
        return None
    i = idx[bad[np.argmin(marg[0][bad])]]
    return tuple(int(x) for x in lat.modes[i]), tuple(int(x) for x in lat.j[i])


def gamma_schedule(gamma: float, n: int) -> float:
    return gamma * (1.0 + 2.0 ** (-n))


# predicate objects ---------------------------------------------------------------

@dataclass(frozen=True)
class ResonancePredicate:
    kind: str
    gamma: float
    tau: float
    lam: float = 1.0
    beta_rot: float = 0.0
    mode_range: int = 8
    eigenvalues: Mapping | None = None
    momentum: MomentumMap = field(default_factory=MomentumMap.standard)
    K_trunc: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown predicate kind {self.kind!r}")
        if self.K_trunc is not None and self.mode_range < self.K_trunc:
            raise ValueError("mode_range must cover the active lattice")
        if self.kind.startswith("Melnikov") and self.eigenvalues is None:
            raise ValueError("Melnikov predicates need an eigenvalue table")

    def _cfg(self) -> "_PredicateConfig":
        # only lam, beta, tau and the momentum map enter the margins
        return _PredicateConfig(self.lam, self.beta_rot, self.tau, self.momentum,
                                self.K_trunc or self.mode_range)

    def __call__(self, samples) -> np.ndarray:
        S, single = _samples(samples)
        if self.kind == "DC":
            ok = np.all(dc_margins(S, self.gamma, self.tau, self.mode_range, self.momentum) >= 0, axis=1)
        elif self.kind == "OmegaGamma":
            ok = np.all(omega_gamma_margins(S, self._cfg(), self.mode_range, self.gamma) >= 0, axis=1)
        elif self.kind == "Melnikov1":
            cfg = self._cfg()
            ok = np.all(melnikov1_margins(S, self.eigenvalues, cfg, self.mode_range, self.gamma,
                                          cfg.lattice)[0] >= 0, axis=1)
        else:
            cfg = self._cfg()
            ok = np.all(melnikov2_margins(S, self.eigenvalues, cfg, self.mode_range, self.gamma,
                                          cfg.lattice)[0] >= 0, axis=1)
        return _ret(ok, single)

    def __and__(self, other: "ResonancePredicate | Callable") -> Callable:
        return lambda s: np.logical_and(self(s), other(s))


@dataclass(frozen=True)
class _PredicateConfig:
    lam: float
    beta_rot: float
    tau: float
    momentum: MomentumMap
    K_trunc: int

    @property
    def lattice(self) -> Lattice:
        return Lattice(self.K_trunc, self.momentum)


# measure estimation ------------------------------------------------------------------

@dataclass(frozen=True)
class MeasureEstimate:
    excluded_fraction: float
    ci_lo: float
    ci_hi: float
    n_samples: int
    n_excluded: int

    def row(self, gamma: float, lam: float) -> dict:
        return {"gamma": gamma, "lambda": lam, "n_samples": self.n_samples,
                "excluded_fraction": self.excluded_fraction, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi}


def sample_annulus(rng: np.random.Generator, n: int, nu: int = 2) -> np.ndarray:
    """Uniform samples of 1 <= |omega| <= 2 by rejection from the cube."""
    out = np.empty((0, nu))
    while len(out) < n:
        batch = rng.uniform(-2.0, 2.0, size=(max(2 * (n - len(out)), 64), nu))
        r = np.linalg.norm(batch, axis=1)
        out = np.vstack([out, batch[(r >= 1.0) & (r <= 2.0)]])
    return out[:n]


def measure_fraction(predicate: Callable, n_samples: int, seed: int, nu: int = 2,
                     chunk: int = 4096) -> MeasureEstimate:
    if n_samples < 1000:
        raise ValueError("measure_fraction needs at least 1000 samples")
    rng = np.random.default_rng(seed)
    S = sample_annulus(rng, n_samples, nu)
    passed = np.concatenate([np.asarray(predicate(S[i:i + chunk]), bool).ravel()
                             for i in range(0, n_samples, chunk)])
    k = int(np.count_nonzero(~passed))
    ci = stats.binomtest(k, n_samples).proportion_ci(confidence_level=0.95)
    return MeasureEstimate(k / n_samples, float(ci.low), float(ci.high), n_samples, k)


def write_measure_csv(path, rows: Iterable[dict]) -> None:
    cols = ["gamma", "lambda", "n_samples", "excluded_fraction", "ci_lo", "ci_hi"]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for r in rows:
            wr.writerow({c: r[c] for c in cols})


def fit_linear_bound(gammas: Sequence[float], fractions: Sequence[float]) -> float:
    """Least-squares C for fraction ~ C gamma through the origin."""
    g = np.asarray(gammas, float)
    f = np.asarray(fractions, float)
    return float(g @ f / (g @ g))


# frequency samplers ----------------------------------------------------------------------

def admissible_sampler(cfg: ProblemConfig, rng: np.random.Generator, n: int,
                       max_attempts: int = 100000, Lmax: int | None = None):
    """First n uniform annulus draws passing DC and Omega_gamma, plus the attempt count."""
    got, attempts = [], 0
    while len(got) < n and attempts < max_attempts:
        batch = sample_annulus(rng, 256, cfg.nu)
        ok = admissible(batch, cfg, Lmax)
        for w, k in zip(batch, ok):
            attempts += 1
            if k:
                got.append(w)
                if len(got) == n:
                    break
    if len(got) < n:
        raise ValueError(f"insufficient admissible samples: {len(got)} of {n} in {attempts} draws")
    return np.array(got), attempts


__all__ = [
    "check_dc", "check_omega_gamma", "check_melnikov1", "check_melnikov2", "admissible",
    "dc_violation", "omega_gamma_violation", "melnikov1_violation", "melnikov2_violation",
    "ResonancePredicate", "ResonanceError", "MeasureEstimate", "measure_fraction",
    "sample_annulus", "admissible_sampler", "gamma_schedule", "mu_array", "mu_table",
    "write_measure_csv", "fit_linear_bound",
]
