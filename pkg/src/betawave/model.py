"""The forced beta-plane equation on the traveling lattice.

Vorticity v, velocity u = grad^perp (-Delta)^{-1} v, dispersion multiplier
tL(j) = j_1/|j|^2.  The rescaled functional is

    F(w) = lam omega.d_phi w + beta tL w + lam^theta N(w, w) - lam^(alpha-theta) f

with N(v1, v2) = B[v1].grad v2.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import signal

from .lattice import DEFAULT_S0, Lattice, LatticeError, MomentumMap, TravelingField
from .opalg import LatticeOperator

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib


class ConfigError(ValueError):
    pass


DEFAULT_FORCING = (((1, 0), 1.0), ((0, 1), 1.0), ((1, 1), 1.0))


@dataclass(frozen=True)
class ProblemConfig:
    """Scalars of the construction.  Derived exponents are properties."""

    lam: float = 1e3
    beta_rot: float = 1.0
    alpha: float = 1.5
    c_small: float = 0.05
    tau: float | None = None
    wave_vectors: tuple[tuple[int, int], ...] = ((1, 0), (0, 1))
    K_trunc: int = 8
    N_approx: int = 2
    s0: float = DEFAULT_S0
    forcing_modes: tuple[tuple[tuple[int, ...], float], ...] = DEFAULT_FORCING
    forcing_even: bool = True
    M_cap: int = 6
    N0: float = 2.0
    chi: float = 1.5
    sigma_bar: float = 10.0
    exp_delta: float = 0.1
    cond_max: float = 1e12
    allow_zero_forcing: bool = False

    def __post_init__(self):
        wv = tuple(tuple(int(a) for a in v) for v in self.wave_vectors)
        object.__setattr__(self, "wave_vectors", wv)
        fm = tuple((tuple(int(a) for a in ell), float(amp)) for ell, amp in self.forcing_modes)
        object.__setattr__(self, "forcing_modes", fm)
        if self.tau is None:
            object.__setattr__(self, "tau", float(len(wv) + 4))
        self.validate()

    # validation ----------------------------------------------------------
    def validate(self) -> None:
        a, c = self.alpha, self.c_small
        if not 1.0 < a < 2.0:
            raise ConfigError(f"alpha={a}: require alpha in (1,2)")
        if not 0.0 < c < (2.0 - a) / 3.0:
            raise ConfigError(f"c_small={c}: require c in (0,(2-alpha)/3) = (0,{(2 - a) / 3:.4g})")
        if not self.theta - 1 + c < 0:
            raise ConfigError("theta - 1 + c must be negative")
        if not self.lam > 1.0:
            raise ConfigError(f"lam={self.lam}: require lambda > 1")
        if self.beta_rot == 0:
            raise ConfigError("beta_rot must be nonzero")
        if self.N_approx <= self.N_threshold:
            raise ConfigError(
                f"N_approx={self.N_approx}: require N > (alpha-(1-c))/(2(1-c)-alpha) = {self.N_threshold:.4g}")
        if self.K_trunc < 1:
            raise ConfigError("K_trunc must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.s0 < 0:
            raise ConfigError("s0 must be non-negative")
        if self.M_cap < 1:
            raise ConfigError("M_cap must be >= 1")
        try:
            m = self.momentum
        except LatticeError as exc:
            raise ConfigError(f"wave_vectors: {exc}") from None
        for ell, _ in self.forcing_modes:
            if len(ell) != m.nu:
                raise ConfigError(f"forcing mode {ell} has wrong length for nu={m.nu}")
            if not np.any(m.pi_transpose(ell)):
                raise ConfigError(f"forcing mode {ell} has zero spatial average (pi^T(l)=0)")
            if max(abs(x) for x in ell) > self.K_trunc:
                raise ConfigError(f"forcing mode {ell} outside K_trunc={self.K_trunc}")
        if not self.forcing_modes and not self.allow_zero_forcing:
            raise ConfigError("forcing must be nonzero")

    # derived -------------------------------------------------------------
    @property
    def theta(self) -> float:
        return self.alpha - 1.0 + self.c_small

    @property
    def gamma(self) -> float:
        return self.lam ** (-self.c_small)

    @property
    def eps(self) -> float:
        return self.lam ** (self.theta - 1.0)

    @property
    def M_uncapped(self) -> int:
        c, a = self.c_small, self.alpha
        return int(math.ceil(max(2 * self.tau, (1 - c) / (2 * (1 - c) - a)) + 1))

    @property
    def M(self) -> int:
        return min(self.M_uncapped, self.M_cap)

    @property
    def eps_M(self) -> float:
        return self.lam ** (self.M * (self.theta - 1.0) + 1.0)

    @property
    def N_threshold(self) -> float:
        c, a = self.c_small, self.alpha
        return (a - (1 - c)) / (2 * (1 - c) - a)

    @property
    def nu(self) -> int:
        return len(self.wave_vectors)

    @property
    def momentum(self) -> MomentumMap:
        return MomentumMap(self.wave_vectors)

    @property
    def lattice(self) -> Lattice:
        return Lattice(self.K_trunc, self.momentum)

    @property
    def forcing(self) -> TravelingField:
        return build_forcing(self.forcing_modes, even=self.forcing_even, K=self.K_trunc,
                             momentum=self.momentum)

    def with_(self, **kw) -> "ProblemConfig":
        return replace(self, **kw)

    def derived(self) -> dict[str, float]:
        return {"theta": self.theta, "gamma": self.gamma, "eps": self.eps, "eps_M": self.eps_M,
                "M": self.M, "M_uncapped": self.M_uncapped, "tau": self.tau}

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["wave_vectors"] = [list(v) for v in self.wave_vectors]
        d["forcing_modes"] = [[list(ell), amp] for ell, amp in self.forcing_modes]
        return d

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ProblemConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = set(cls.__dataclass_fields__)
        derived = {"theta", "gamma", "eps", "eps_M"}
        bad = set(data) & derived
        if bad:
            raise ConfigError(f"derived quantities cannot be supplied: {sorted(bad)}")
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "wave_vectors" in data:
            data["wave_vectors"] = tuple(tuple(v) for v in data["wave_vectors"])
        if "forcing_modes" in data:
            data["forcing_modes"] = tuple((tuple(e), float(a)) for e, a in data["forcing_modes"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ProblemConfig":
        path = Path(path)
        text = path.read_bytes()
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text.decode())
        data = data.get("problem", data)
        return cls.from_mapping(data)


# symbols -------------------------------------------------------------------

def multiplier_tL(j) -> float:
    j1, j2 = (int(x) for x in j)
    if j1 == 0 and j2 == 0:
        raise ValueError("tL undefined at zero mode")
    return j1 / (j1 * j1 + j2 * j2)


def tL_diag(lat: Lattice) -> np.ndarray:
    """tL(j(l)) over the flat lattice, 0 where j = 0."""
    out = np.zeros(lat.size)
    m = lat.mask
    out[m] = lat.j[m, 0] / lat.j_sq[m]
    return out


def _bs_symbol(lat: Lattice) -> np.ndarray:
    """i(-j2, j1)/|j|^2 per flat mode, shape (2, n)."""
    sym = np.zeros((2, lat.size), complex)
    m = lat.mask
    sym[0, m] = -1j * lat.j[m, 1] / lat.j_sq[m]
    sym[1, m] = 1j * lat.j[m, 0] / lat.j_sq[m]
    return sym


def biot_savart(v: TravelingField) -> tuple[np.ndarray, np.ndarray]:
    """Velocity coefficient tables (u1, u2) in v's dense box layout."""
    lat = v.lattice
    sym = _bs_symbol(lat)
    u = sym * v.flat[None, :]
    return u[0].reshape(lat.shape), u[1].reshape(lat.shape)


def divergence(u1: np.ndarray, u2: np.ndarray, lat: Lattice) -> np.ndarray:
    return 1j * (lat.j[:, 0] * u1.ravel() + lat.j[:, 1] * u2.ravel())


def _crop(full: np.ndarray, K: int, nu: int) -> np.ndarray:
    sl = tuple(slice(K, 3 * K + 1) for _ in range(nu))
    return full[sl]


def nonlinearity(v1: TravelingField, v2: TravelingField, method: str = "direct") -> TravelingField:
    """B[v1].grad v2, convolved on the l-lattice and truncated to K."""
    v1._check_same(v2)
    lat = v1.lattice
    u1, u2 = biot_savart(v1)
    g1 = (1j * lat.j[:, 0] * v2.flat).reshape(lat.shape)
    g2 = (1j * lat.j[:, 1] * v2.flat).reshape(lat.shape)
    if method == "direct":
        full = signal.convolve(u1, g1, method="direct") + signal.convolve(u2, g2, method="direct")
    elif method == "fft":
        full = signal.fftconvolve(u1, g1) + signal.fftconvolve(u2, g2)
    else:
        raise ValueError(f"unknown convolution method {method!r}")
    out = _crop(full, lat.K, lat.nu).ravel().copy()
    out[~lat.mask] = 0
    return TravelingField.from_flat(out, lat.K, lat.momentum)


def transport_divisor(lat: Lattice, cfg: ProblemConfig, omega) -> np.ndarray:
    """d(l) = lam omega.l + beta tL(j(l)); the forward symbol is i d(l)."""
    omega = np.asarray(omega, float)
    return cfg.lam * (lat.modes @ omega) + cfg.beta_rot * tL_diag(lat)


def forward_linear(w: TravelingField, cfg: ProblemConfig, omega) -> TravelingField:
    """(lam omega.d_phi + beta tL) w."""
    lat = w.lattice
    return TravelingField.from_flat(1j * transport_divisor(lat, cfg, omega) * w.flat, lat.K, lat.momentum)


def functional_F(w: TravelingField, cfg: ProblemConfig, omega, forcing: TravelingField | None = None,
                 method: str = "direct") -> TravelingField:
    f = cfg.forcing if forcing is None else forcing
    lin = forward_linear(w, cfg, omega)
    quad = nonlinearity(w, w, method=method)
    return TravelingField.from_flat(
        lin.flat + cfg.lam ** cfg.theta * quad.flat - cfg.lam ** (cfg.alpha - cfg.theta) * f.flat,
        w.K_trunc, w.momentum)


def _transport_blocks(w: TravelingField) -> tuple[np.ndarray, np.ndarray]:
    """Matrices of h -> B[w].grad h and h -> grad w . B[h] on the lattice."""
    lat = w.lattice
    big = Lattice(2 * lat.K, lat.momentum)
    wb = lat.embed(w.dense, 2 * lat.K).ravel()
    sym_big = _bs_symbol(big)
    a0 = sym_big * wb[None, :]                  # velocity of w on the doubled box
    gw = 1j * big.j.T * wb[None, :]             # grad w on the doubled box
    D = lat.diff_index
    sym = _bs_symbol(lat)
    jj = 1j * lat.j.T                           # i j(l') per column
    A = a0[0][D] * jj[0][None, :] + a0[1][D] * jj[1][None, :]
    E = gw[0][D] * sym[0][None, :] + gw[1][D] * sym[1][None, :]
    return A, E


def linearized_L(w: TravelingField, cfg: ProblemConfig, omega) -> LatticeOperator:
    """lam omega.d_phi + beta tL + lam^theta (a0.grad + E0) at w."""
    lat = w.lattice
    A, E = _transport_blocks(w)
    D = np.diag(1j * transport_divisor(lat, cfg, omega))
    return LatticeOperator(D + cfg.lam ** cfg.theta * (A + E), lat)


def linear_parts(w: TravelingField, cfg: ProblemConfig, omega) -> dict[str, np.ndarray]:
    """Diagonal symbol and the two variable-coefficient blocks separately."""
    lat = w.lattice
    A, E = _transport_blocks(w)
    return {"omega_d": 1j * cfg.lam * (lat.modes @ np.asarray(omega, float)),
            "tL": 1j * cfg.beta_rot * tL_diag(lat), "a0_grad": A, "E0": E}


def build_forcing(spec: Sequence, even: bool = True, K: int = 8,
                  momentum: MomentumMap | None = None) -> TravelingField:
    """Real forcing from (l, amplitude) pairs.

    even=True gives amplitude*cos(l.phi + j.x); otherwise the pair is
    placed as amplitude*e^{i(...)}/2 + c.c. with the given phase (a plain
    real amplitude still produces cos; complex amplitudes break parity).
    """
    momentum = momentum or MomentumMap.standard()
    lat = Lattice(K, momentum)
    flat = np.zeros(lat.size, complex)
    for ell, amp in spec:
        ell = tuple(int(x) for x in ell)
        if not np.any(momentum.pi_transpose(ell)):
            raise LatticeError(f"forcing mode {ell} violates the zero-average constraint")
        a = complex(amp)
        if even:
            a = complex(a.real, 0.0)
        i = lat.index(ell)
        flat[i] += a / 2
        flat[lat.neg[i]] += np.conj(a) / 2
    return TravelingField.from_flat(flat, K, momentum)


def finite_difference_check(w: TravelingField, h: TravelingField, cfg: ProblemConfig, omega,
                            t: float = 1e-4) -> float:
    """Relative mismatch of central differences of F against L h."""
    Fp = functional_F(w + t * h, cfg, omega)
    Fm = functional_F(w - t * h, cfg, omega)
    fd = (Fp.flat - Fm.flat) / (2 * t)
    Lh = linearized_L(w, cfg, omega).apply_flat(h.flat)
    return float(np.linalg.norm(fd - Lh) / max(np.linalg.norm(Lh), 1e-300))


__all__ = [
    "ProblemConfig", "ConfigError", "multiplier_tL", "tL_diag", "biot_savart", "divergence",
    "nonlinearity", "functional_F", "linearized_L", "build_forcing", "forward_linear",
    "transport_divisor", "linear_parts", "finite_difference_check", "DEFAULT_FORCING",
]
