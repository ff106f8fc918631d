"""Truncated Fourier lattices for quasi-periodic traveling waves.

A traveling wave on T^nu x T^2 has Fourier support on pairs (l, j) with
pi^T(l) + j = 0, so it is indexed by l alone and the spatial mode is
j(l) = -pi^T(l).  Everything here works on the finite box |l|_inf <= K.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_S0 = 7.0
REALITY_RTOL = 1e-10


class LatticeError(ValueError):
    pass


def _as_int_tuple(v) -> tuple[int, ...]:
    arr = np.asarray(v)
    if arr.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise LatticeError(f"non-integer mode {v!r}")
    return tuple(int(x) for x in arr.ravel())


@dataclass(frozen=True)
class MomentumMap:
    """The integer map pi^T : Z^nu -> Z^2, l -> sum_k l_k jbar_k."""

    wave_vectors: tuple[tuple[int, int], ...]

    def __post_init__(self):
        wv = tuple(_as_int_tuple(v) for v in self.wave_vectors)
        if any(len(v) != 2 for v in wv):
            raise LatticeError("wave vectors must be integer 2-vectors")
        object.__setattr__(self, "wave_vectors", wv)
        # rank 2 over Q: some 2x2 minor is a nonzero integer
        minors = [
            wv[a][0] * wv[b][1] - wv[a][1] * wv[b][0]
            for a in range(len(wv))
            for b in range(a + 1, len(wv))
        ]
        if not any(m != 0 for m in minors):
            raise LatticeError("wave vectors must span a 2-dimensional space")

    @classmethod
    def standard(cls) -> "MomentumMap":
        return cls(((1, 0), (0, 1)))

    @property
    def nu(self) -> int:
        return len(self.wave_vectors)

    @cached_property
    def matrix(self) -> np.ndarray:
        """Integer 2 x nu matrix P with pi^T(l) = P @ l."""
        return np.array(self.wave_vectors, dtype=np.int64).T

    def pi_transpose(self, ell) -> np.ndarray:
        ell = np.asarray(ell, dtype=np.int64)
        return ell @ self.matrix.T

    def spatial_mode(self, ell) -> np.ndarray:
        return -self.pi_transpose(ell)

    def pi(self, x) -> np.ndarray:
        """pi : R^2 -> R^nu, (pi x)_k = jbar_k . x."""
        x = np.asarray(x, dtype=float)
        return x @ self.matrix.astype(float)

    @property
    def invertible(self) -> bool:
        return self.nu == 2

    def to_json(self) -> list[list[int]]:
        return [list(v) for v in self.wave_vectors]


class Lattice:
    """Index bookkeeping for the box |l|_inf <= K (C order of a dense array)."""

    _cache: dict = {}

    def __new__(cls, K: int, momentum: MomentumMap):
        key = (int(K), momentum)
        obj = cls._cache.get(key)
        if obj is None:
            obj = super().__new__(cls)
            obj._init(int(K), momentum)
            cls._cache[key] = obj
        return obj

    def _init(self, K: int, momentum: MomentumMap):
        if K < 0:
            raise LatticeError("K_trunc must be non-negative")
        self.K = K
        self.momentum = momentum
        self.nu = momentum.nu
        self.width = 2 * K + 1
        self.shape = (self.width,) * self.nu
        self.size = self.width ** self.nu
        grids = np.meshgrid(*([np.arange(-K, K + 1)] * self.nu), indexing="ij")
        self.modes = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
        self.j = momentum.spatial_mode(self.modes)
        self.mask = np.any(self.j != 0, axis=1)
        # C-order box is symmetric, so -l sits at the mirrored flat index
        self.neg = np.arange(self.size)[::-1].copy()
        self.l_sup = np.abs(self.modes).max(axis=1) if self.nu else np.zeros(1, int)
        self.j_sup = np.abs(self.j).max(axis=1)
        self.bracket = np.maximum(1, np.maximum(self.l_sup, self.j_sup))
        self.l_bracket = np.maximum(1, self.l_sup)
        self.j_sq = (self.j ** 2).sum(axis=1)

    def __reduce__(self):
        return (Lattice, (self.K, self.momentum))

    def index(self, ell) -> int:
        ell = np.asarray(ell, dtype=np.int64)
        if ell.shape != (self.nu,) or np.any(np.abs(ell) > self.K):
            raise LatticeError(f"mode {tuple(ell)} outside lattice K={self.K}")
        return int(np.ravel_multi_index(tuple(ell + self.K), self.shape))

    def contains(self, ell) -> bool:
        ell = np.asarray(ell)
        return ell.shape == (self.nu,) and bool(np.all(np.abs(ell) <= self.K))

    @cached_property
    def diff_index(self) -> np.ndarray:
        """Flat index of l - l' inside the doubled box |k| <= 2K."""
        big = Lattice(2 * self.K, self.momentum)
        d = self.modes[:, None, :] - self.modes[None, :, :] + 2 * self.K
        return np.ravel_multi_index(tuple(np.moveaxis(d, -1, 0)), big.shape)

    @cached_property
    def diff_sup(self) -> np.ndarray:
        return np.abs(self.modes[:, None, :] - self.modes[None, :, :]).max(axis=-1)

    @cached_property
    def diff_bracket(self) -> np.ndarray:
        dj = np.abs(self.j[:, None, :] - self.j[None, :, :]).max(axis=-1)
        return np.maximum(1, np.maximum(self.diff_sup, dj))

    def embed(self, dense: np.ndarray, K_new: int) -> np.ndarray:
        """Zero-pad (K_new >= K) or crop (K_new < K) a dense coefficient box."""
        dense = np.asarray(dense)
        lead = dense.shape[: dense.ndim - self.nu]
        out = np.zeros(lead + (2 * K_new + 1,) * self.nu, dtype=dense.dtype)
        m = min(K_new, self.K)
        src = tuple(slice(self.K - m, self.K + m + 1) for _ in range(self.nu))
        dst = tuple(slice(K_new - m, K_new + m + 1) for _ in range(self.nu))
        out[(Ellipsis,) + dst] = dense[(Ellipsis,) + src]
        return out


def _scale(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


@dataclass(frozen=True, eq=False)
class TravelingField:
    """Fourier coefficients u(l) of a real zero-average traveling wave.

    Stored densely on the box; ``coeffs`` gives the sparse view.  The
    array is read-only so fields can be shared freely.
    """

    dense: np.ndarray
    K_trunc: int
    momentum: MomentumMap = field(default_factory=MomentumMap.standard)

    def __post_init__(self):
        lat = Lattice(self.K_trunc, self.momentum)
        arr = np.array(self.dense, dtype=complex).reshape(lat.shape)
        flat = arr.ravel()
        scale = _scale(flat)
        if scale > 0:
            if np.any(np.abs(flat[~lat.mask]) > REALITY_RTOL * scale):
                raise LatticeError("zero-average violated: mass on modes with pi^T(l)=0")
            if np.max(np.abs(flat - np.conj(flat[lat.neg]))) > REALITY_RTOL * scale:
                raise LatticeError("reality violated: u(-l) != conj(u(l))")
        flat = 0.5 * (flat + np.conj(flat[lat.neg]))
        flat[~lat.mask] = 0.0
        arr = flat.reshape(lat.shape)
        arr.setflags(write=False)
        object.__setattr__(self, "dense", arr)

    # construction -----------------------------------------------------
    @classmethod
    def zeros(cls, K: int, momentum: MomentumMap | None = None) -> "TravelingField":
        momentum = momentum or MomentumMap.standard()
        return cls(np.zeros(Lattice(K, momentum).shape, complex), K, momentum)

    @classmethod
    def from_coeffs(cls, coeffs: Mapping, K: int, momentum: MomentumMap | None = None,
                    rtol: float = REALITY_RTOL) -> "TravelingField":
        momentum = momentum or MomentumMap.standard()
        lat = Lattice(K, momentum)
        flat = np.zeros(lat.size, complex)
        for ell, amp in coeffs.items():
            flat[lat.index(ell)] = complex(amp)
        if rtol < REALITY_RTOL:
            scale = _scale(flat)
            if scale > 0 and (
                np.any(np.abs(flat[~lat.mask]) > rtol * scale)
                or np.max(np.abs(flat - np.conj(flat[lat.neg]))) > rtol * scale
            ):
                raise LatticeError("coefficients violate reality or zero-average")
        return cls(flat.reshape(lat.shape), K, momentum)

    @classmethod
    def from_flat(cls, flat: np.ndarray, K: int, momentum: MomentumMap) -> "TravelingField":
        return cls(np.asarray(flat).reshape(Lattice(K, momentum).shape), K, momentum)

    @classmethod
    def random(cls, rng: np.random.Generator, K: int, momentum: MomentumMap | None = None,
               decay: float = 1.0, support: int | None = None) -> "TravelingField":
        momentum = momentum or MomentumMap.standard()
        lat = Lattice(K, momentum)
        amp = rng.standard_normal(lat.size) + 1j * rng.standard_normal(lat.size)
        amp *= np.exp(-decay * lat.l_sup)
        if support is not None:
            amp[lat.l_sup > support] = 0
        amp = 0.5 * (amp + np.conj(amp[lat.neg]))
        amp[~lat.mask] = 0
        return cls(amp.reshape(lat.shape), K, momentum)

    # views -------------------------------------------------------------
    @property
    def lattice(self) -> Lattice:
        return Lattice(self.K_trunc, self.momentum)

    @property
    def flat(self) -> np.ndarray:
        return self.dense.ravel()

    @property
    def nu(self) -> int:
        return self.momentum.nu

    @property
    def coeffs(self) -> dict[tuple[int, ...], complex]:
        lat = self.lattice
        nz = np.flatnonzero(self.flat)
        return {tuple(int(a) for a in lat.modes[i]): complex(self.flat[i]) for i in nz}

    def __getitem__(self, ell) -> complex:
        lat = self.lattice
        if not lat.contains(ell):
            return 0j
        return complex(self.flat[lat.index(ell)])

    def with_K(self, K: int) -> "TravelingField":
        return TravelingField(self.lattice.embed(self.dense, K), K, self.momentum)

    # arithmetic ----------------------------------------------------------
    def _check_same(self, other: "TravelingField"):
        if other.K_trunc != self.K_trunc or other.momentum != self.momentum:
            raise LatticeError("fields live on different lattices")

    def __add__(self, other: "TravelingField") -> "TravelingField":
        self._check_same(other)
        return TravelingField(self.dense + other.dense, self.K_trunc, self.momentum)

    def __sub__(self, other: "TravelingField") -> "TravelingField":
        self._check_same(other)
        return TravelingField(self.dense - other.dense, self.K_trunc, self.momentum)

    def __neg__(self) -> "TravelingField":
        return TravelingField(-self.dense, self.K_trunc, self.momentum)

    def __mul__(self, c: float) -> "TravelingField":
        if np.iscomplexobj(c) and np.imag(c) != 0:
            raise LatticeError("only real scalars keep a field real")
        return TravelingField(self.dense * float(np.real(c)), self.K_trunc, self.momentum)

    __rmul__ = __mul__

    def allclose(self, other: "TravelingField", rtol=1e-12, atol=0.0) -> bool:
        self._check_same(other)
        return bool(np.allclose(self.dense, other.dense, rtol=rtol, atol=atol))

    def __repr__(self) -> str:
        return f"TravelingField(K={self.K_trunc}, nu={self.nu}, nnz={np.count_nonzero(self.flat)})"

    # serialization -------------------------------------------------------
    def to_json(self) -> dict:
        items = [
            [list(ell), float(np.real(a)), float(np.imag(a))] for ell, a in sorted(self.coeffs.items())
        ]
        return {
            "nu": self.nu,
            "wave_vectors": self.momentum.to_json(),
            "K_trunc": self.K_trunc,
            "coeffs": items,
        }

    @classmethod
    def from_json(cls, data: Mapping | str) -> "TravelingField":
        if isinstance(data, str):
            data = json.loads(data)
        momentum = MomentumMap(tuple(tuple(v) for v in data["wave_vectors"]))
        if momentum.nu != int(data["nu"]):
            raise LatticeError("nu does not match the number of wave vectors")
        coeffs = {}
        for ell, re, im in data["coeffs"]:
            key = _as_int_tuple(ell)
            if key in coeffs:
                raise LatticeError(f"duplicate mode {key}")
            coeffs[key] = complex(re, im)
        return cls.from_coeffs(coeffs, int(data["K_trunc"]), momentum, rtol=1e-12)


def save_field(path, f: TravelingField) -> None:
    with open(path, "w") as fh:
        json.dump(f.to_json(), fh)


def load_field(path) -> TravelingField:
    with open(path) as fh:
        return TravelingField.from_json(json.load(fh))


def assert_traveling(f: TravelingField) -> None:
    """Reality, zero average and support on the lattice, to round-off."""
    lat = f.lattice
    flat = f.flat
    scale = _scale(flat)
    if scale == 0:
        return
    assert np.all(flat[~lat.mask] == 0), "zero-average violated"
    assert np.max(np.abs(flat - np.conj(flat[lat.neg]))) <= 1e-12 * scale, "reality violated"


# norms -------------------------------------------------------------------

def sobolev_norm(f: TravelingField, s: float = DEFAULT_S0) -> float:
    lat = f.lattice
    w = lat.bracket.astype(float) ** (2.0 * s)
    return float(np.sqrt(np.sum(w * np.abs(f.flat) ** 2)))


def sobolev_norm_flat(flat: np.ndarray, lat: Lattice, s: float = DEFAULT_S0) -> float:
    w = lat.bracket.astype(float) ** (2.0 * s)
    return float(np.sqrt(np.sum(w * np.abs(flat) ** 2, axis=-1)))


def in_annulus(omega) -> bool:
    r = float(np.linalg.norm(omega))
    return 1.0 <= r <= 2.0


@dataclass(frozen=True)
class ParamGrid:
    """Finite frequency sample with designated pairs for Lipschitz quotients."""

    samples: np.ndarray
    pairs: tuple[tuple[int, int], ...] = ()
    gamma: float = 1.0

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if s.shape[0] == 0:
            raise LatticeError("parameter grid needs at least one sample")
        r = np.linalg.norm(s, axis=1)
        if np.any(r < 1.0) or np.any(r > 2.0):
            raise LatticeError("samples must satisfy 1 <= |omega| <= 2")
        if not 0.0 <= self.gamma <= 1.0:
            raise LatticeError("gamma must lie in [0, 1]")
        for a, b in self.pairs:
            if not (0 <= a < len(s) and 0 <= b < len(s)):
                raise LatticeError("pair index out of range")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "pairs", tuple((int(a), int(b)) for a, b in self.pairs))

    @classmethod
    def axis_pairs(cls, base: Sequence, h: float = 1e-3, gamma: float = 1.0) -> "ParamGrid":
        """Each base sample gets one partner per axis at distance h."""
        base = np.atleast_2d(np.asarray(base, dtype=float))
        pts = [w for w in base]
        pairs = []
        for i, w in enumerate(base):
            for ax in range(base.shape[1]):
                for sign in (1.0, -1.0):
                    cand = w.copy()
                    cand[ax] += sign * h
                    if in_annulus(cand):
                        pts.append(cand)
                        pairs.append((i, len(pts) - 1))
                        break
        return cls(np.array(pts), tuple(pairs), gamma)


def lip_gamma_norm(fields, grid: ParamGrid, s: float = DEFAULT_S0, gamma: float | None = None,
                   return_parts: bool = False):
    """sup-part plus gamma times the largest paired difference quotient.

    ``fields`` is either a callable omega -> TravelingField or a sequence
    aligned with ``grid.samples``.
    """
    gamma = grid.gamma if gamma is None else gamma
    if callable(fields):
        vals = [fields(w) for w in grid.samples]
    else:
        vals = list(fields)
        if len(vals) != len(grid.samples):
            raise LatticeError("one field per grid sample is required")
    sup = max(sobolev_norm(v, s) for v in vals)
    lip = 0.0
    for a, b in grid.pairs:
        dist = float(np.linalg.norm(grid.samples[a] - grid.samples[b]))
        if dist == 0.0:
            raise LatticeError("degenerate Lipschitz pair")
        lip = max(lip, sobolev_norm(vals[a] - vals[b], s - 1) / dist)
    total = sup + gamma * lip
    if return_parts:
        return {"total": total, "sup": sup, "lip": lip, "n_pairs": len(grid.pairs),
                "lip_term_recorded": bool(grid.pairs)}
    return total


# projectors and predicates ------------------------------------------------

def project_low(f: TravelingField, K: float) -> TravelingField:
    if K < 1:
        raise LatticeError("projector size must be >= 1")
    keep = f.lattice.l_bracket <= K
    return TravelingField.from_flat(np.where(keep, f.flat, 0), f.K_trunc, f.momentum)


def project_high(f: TravelingField, K: float) -> TravelingField:
    if K < 1:
        raise LatticeError("projector size must be >= 1")
    keep = f.lattice.l_bracket > K
    return TravelingField.from_flat(np.where(keep, f.flat, 0), f.K_trunc, f.momentum)


def parity(f: TravelingField, rtol: float = 0.0) -> str:
    """'even', 'odd' or 'neither' from u(-l) = +-u(l).

    rtol = 0 compares the stored numbers exactly; a positive rtol is
    measured against the largest coefficient.
    """
    flat = f.flat
    tol = rtol * _scale(flat)
    mirrored = flat[f.lattice.neg]
    if np.all(np.abs(mirrored - flat) <= tol):
        return "even"
    if np.all(np.abs(mirrored + flat) <= tol):
        return "odd"
    return "neither"


def is_odd(f: TravelingField, rtol: float = 0.0) -> bool:
    flat = f.flat
    return bool(np.all(np.abs(flat[f.lattice.neg] + flat) <= rtol * _scale(flat)))


def is_even(f: TravelingField, rtol: float = 0.0) -> bool:
    flat = f.flat
    return bool(np.all(np.abs(flat[f.lattice.neg] - flat) <= rtol * _scale(flat)))


def evaluate(f: TravelingField, phi, x) -> float:
    """Point value sum_l u(l) exp(i(l.phi + j(l).x))."""
    lat = f.lattice
    phase = lat.modes @ np.asarray(phi, float) + lat.j @ np.asarray(x, float)
    val = np.sum(f.flat * np.exp(1j * phase))
    amp = float(np.sum(np.abs(f.flat)))
    assert abs(val.imag) <= 1e-12 * max(amp, 1e-300), "evaluation is not real"
    return float(val.real)


def evaluate_many(f: TravelingField, phis: np.ndarray, xs: np.ndarray) -> np.ndarray:
    lat = f.lattice
    phase = np.atleast_2d(phis) @ lat.modes.T + np.atleast_2d(xs) @ lat.j.T
    return np.real(np.exp(1j * phase) @ f.flat)


def sum_fields(fields: Iterable[TravelingField]) -> TravelingField:
    fields = list(fields)
    out = fields[0]
    for g in fields[1:]:
        out = out + g
    return out


__all__ = [
    "MomentumMap", "Lattice", "TravelingField", "ParamGrid", "LatticeError",
    "sobolev_norm", "lip_gamma_norm", "project_low", "project_high", "parity",
    "is_odd", "is_even", "evaluate", "evaluate_many", "assert_traveling",
    "save_field", "load_field", "in_annulus", "DEFAULT_S0",
]
