"""Operators on the traveling lattice: decay norms, structure, projectors, exp."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .lattice import DEFAULT_S0, Lattice, LatticeError, MomentumMap, TravelingField

STRUCTURE_RTOL = 1e-11


class SmallnessError(ArithmeticError):
    pass


@dataclass(frozen=True)
class DecayIndex:
    m: float = 0.0
    s: float = DEFAULT_S0

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("decay index needs s >= 0")


class LatticeOperator:
    """Dense matrix A[l, l'] acting on zero-average traveling fields."""

    __slots__ = ("entries", "lattice", "is_restriction_of_mp", "ambient_average")

    def __init__(self, entries, lattice: Lattice, is_restriction_of_mp: bool = True,
                 ambient_average: np.ndarray | None = None):
        A = np.array(entries, dtype=complex)
        if A.shape != (lattice.size, lattice.size):
            raise LatticeError(f"operator shape {A.shape} does not match lattice size {lattice.size}")
        dead = ~lattice.mask
        A[dead, :] = 0
        A[:, dead] = 0
        A.setflags(write=False)
        self.entries = A
        self.lattice = lattice
        self.is_restriction_of_mp = bool(is_restriction_of_mp)
        self.ambient_average = ambient_average

    # constructors --------------------------------------------------------
    @classmethod
    def identity(cls, lattice: Lattice) -> "LatticeOperator":
        return cls(np.diag(lattice.mask.astype(complex)), lattice)

    @classmethod
    def zeros(cls, lattice: Lattice) -> "LatticeOperator":
        return cls(np.zeros((lattice.size, lattice.size), complex), lattice)

    @classmethod
    def diagonal(cls, values, lattice: Lattice) -> "LatticeOperator":
        return cls(np.diag(np.asarray(values, complex)), lattice)

    @classmethod
    def from_symbol(cls, fn, lattice: Lattice) -> "LatticeOperator":
        """Fourier multiplier j -> fn(j) on nonzero spatial modes."""
        vals = np.zeros(lattice.size, complex)
        for i in np.flatnonzero(lattice.mask):
            vals[i] = fn(lattice.j[i])
        return cls.diagonal(vals, lattice)

    @classmethod
    def from_ambient_blocks(cls, blocks: Mapping, lattice: Lattice) -> "LatticeOperator":
        """Restrict an ambient operator given as {(k, j, j'): R(k)_j^j'}.

        Entries whose (k, j, j') break pi^T(k) + j - j' = 0 cannot appear in
        the restriction; their presence clears ``is_restriction_of_mp``.
        """
        A = np.zeros((lattice.size, lattice.size), complex)
        mp = True
        P = lattice.momentum.matrix
        avg = {}
        for (k, j, jp), val in blocks.items():
            k = np.asarray(k, np.int64)
            j = np.asarray(j, np.int64)
            jp = np.asarray(jp, np.int64)
            if np.any(P @ k + j - jp != 0):
                mp = False
                if not np.any(k):
                    avg[(tuple(j), tuple(jp))] = complex(val)
                continue
            if not np.any(k):
                avg[(tuple(j), tuple(jp))] = complex(val)
            # (k, j, j') sits at row l, column l' with l - l' = k and j = j(l)
            for col in np.flatnonzero(np.all(lattice.j == jp, axis=1)):
                ell = lattice.modes[col] + k
                if lattice.contains(ell) and np.all(lattice.j[lattice.index(ell)] == j):
                    A[lattice.index(ell), col] += val
        avg_mat = None
        if avg:
            js = sorted({a for a, _ in avg} | {b for _, b in avg})
            pos = {j: i for i, j in enumerate(js)}
            avg_mat = np.zeros((len(js), len(js)), complex)
            for (a, b), v in avg.items():
                avg_mat[pos[a], pos[b]] = v
        return cls(A, lattice, is_restriction_of_mp=mp, ambient_average=avg_mat)

    # basic algebra -------------------------------------------------------
    def _same(self, other: "LatticeOperator"):
        if not isinstance(other, LatticeOperator) or other.lattice is not self.lattice:
            raise LatticeError("dimension mismatch: operators live on different lattices")

    def __matmul__(self, other):
        if isinstance(other, TravelingField):
            return self.apply(other)
        return compose(self, other)

    def __add__(self, other: "LatticeOperator") -> "LatticeOperator":
        self._same(other)
        return LatticeOperator(self.entries + other.entries, self.lattice,
                               self.is_restriction_of_mp and other.is_restriction_of_mp)

    def __sub__(self, other: "LatticeOperator") -> "LatticeOperator":
        self._same(other)
        return LatticeOperator(self.entries - other.entries, self.lattice,
                               self.is_restriction_of_mp and other.is_restriction_of_mp)

    def __neg__(self) -> "LatticeOperator":
        return LatticeOperator(-self.entries, self.lattice, self.is_restriction_of_mp)

    def scale(self, c: complex) -> "LatticeOperator":
        return LatticeOperator(c * self.entries, self.lattice, self.is_restriction_of_mp)

    def apply(self, f: TravelingField) -> TravelingField:
        if f.K_trunc != self.lattice.K or f.momentum != self.lattice.momentum:
            raise LatticeError("field and operator live on different lattices")
        return TravelingField.from_flat(self.entries @ f.flat, f.K_trunc, f.momentum)

    def apply_flat(self, flat: np.ndarray) -> np.ndarray:
        return self.entries @ flat

    @property
    def shape(self):
        return self.entries.shape

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.entries))

    def __repr__(self):
        return f"LatticeOperator(K={self.lattice.K}, nnz={np.count_nonzero(self.entries)})"

    # serialization -------------------------------------------------------
    def to_json(self) -> dict:
        lat = self.lattice
        rows, cols = np.nonzero(self.entries)
        return {
            "K_trunc": lat.K,
            "wave_vectors": lat.momentum.to_json(),
            "entries": [
                [lat.modes[r].tolist(), lat.modes[c].tolist(),
                 float(self.entries[r, c].real), float(self.entries[r, c].imag)]
                for r, c in zip(rows, cols)
            ],
        }

    @classmethod
    def from_json(cls, data) -> "LatticeOperator":
        if isinstance(data, str):
            data = json.loads(data)
        momentum = MomentumMap(tuple(tuple(v) for v in data.get("wave_vectors", ((1, 0), (0, 1)))))
        lat = Lattice(int(data["K_trunc"]), momentum)
        A = np.zeros((lat.size, lat.size), complex)
        for l1, l2, re, im in data["entries"]:
            A[lat.index(l1), lat.index(l2)] = complex(re, im)
        return cls(A, lat)


def compose(A: LatticeOperator, B: LatticeOperator) -> LatticeOperator:
    A._same(B)
    return LatticeOperator(A.entries @ B.entries, A.lattice,
                           A.is_restriction_of_mp and B.is_restriction_of_mp)


def commutator(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return A @ B - B @ A


# norms -------------------------------------------------------------------

def _column_weights(lat: Lattice, idx: DecayIndex) -> tuple[np.ndarray, np.ndarray]:
    row_w = lat.diff_bracket.astype(float) ** (2.0 * idx.s)
    col_w = np.maximum(1, lat.j_sup).astype(float) ** (-idx.m)
    return row_w, col_w


def decay_norm_matrix(A: np.ndarray, lat: Lattice, idx: DecayIndex = DecayIndex()) -> float:
    row_w, col_w = _column_weights(lat, idx)
    cols = np.sqrt(np.sum(row_w * np.abs(A) ** 2, axis=0)) * col_w
    cols = cols[lat.mask]
    return float(cols.max()) if cols.size else 0.0


def decay_norm(A: LatticeOperator, idx: DecayIndex = DecayIndex()) -> float:
    """Column sup of the weighted l2 mass, times <j'>^(-m)."""
    return decay_norm_matrix(A.entries, A.lattice, idx)


def operator_norm(A: LatticeOperator) -> float:
    return float(np.linalg.norm(A.entries, 2))


# structure -------------------------------------------------------------------

def diag_part(A: LatticeOperator) -> LatticeOperator:
    return LatticeOperator(np.diag(np.diag(A.entries)), A.lattice, A.is_restriction_of_mp)


def phi_average(A: LatticeOperator) -> LatticeOperator:
    """Entries with l = l'.  On the traveling lattice this is the diagonal."""
    return diag_part(A)


def phi_average_is_diagonal(A: LatticeOperator) -> bool:
    """True when the phi-average of the ambient operator is diagonal in j.

    A traveling restriction alone cannot see the ambient average; when it was
    recorded at construction we test it, otherwise we rely on momentum
    preservation of the ambient operator.
    """
    if A.ambient_average is not None:
        M = A.ambient_average
        off = M - np.diag(np.diag(M))
        return bool(np.all(off == 0))
    return A.is_restriction_of_mp


def _mirror(A: np.ndarray, lat: Lattice) -> np.ndarray:
    return A[np.ix_(lat.neg, lat.neg)]


def structure_check(A: LatticeOperator, rtol: float = STRUCTURE_RTOL) -> dict[str, bool]:
    E = A.entries
    mirror = _mirror(E, A.lattice)
    tol = rtol * max(float(np.max(np.abs(E))) if E.size else 0.0, 1e-300)
    return {
        "real": bool(np.max(np.abs(E - np.conj(mirror))) <= tol),
        "reversible": bool(np.max(np.abs(E + mirror)) <= tol),
        "reversibility_preserving": bool(np.max(np.abs(E - mirror)) <= tol),
    }


def realify(E: np.ndarray, lat: Lattice) -> np.ndarray:
    """Closest matrix satisfying the reality identity."""
    return 0.5 * (E + np.conj(_mirror(E, lat)))


def op_project(A: LatticeOperator, N: float) -> tuple[LatticeOperator, LatticeOperator]:
    if N < 0:
        raise ValueError("N must be >= 0")
    lat = A.lattice
    dj = np.abs(lat.j[:, None, :] - lat.j[None, :, :]).max(axis=-1)
    keep = (lat.diff_sup <= N) & (dj <= N)
    low = np.where(keep, A.entries, 0)
    return (LatticeOperator(low, lat, A.is_restriction_of_mp),
            LatticeOperator(A.entries - low, lat, A.is_restriction_of_mp))


def projection_mask(lat: Lattice, N: float) -> np.ndarray:
    dj = np.abs(lat.j[:, None, :] - lat.j[None, :, :]).max(axis=-1)
    return (lat.diff_sup <= N) & (dj <= N)


# exponentials ----------------------------------------------------------------

def expm_series(X: np.ndarray, tol: float = 1e-14, max_terms: int = 60) -> tuple[np.ndarray, int]:
    """sum_n X^n/n! with a Frobenius tail certificate.

    Stops at the first k with ||X||^k/k! * 1/(1-||X||/(k+1)) below tol times
    the identity scale; raises if 60 terms do not certify.
    """
    n = X.shape[0]
    a = float(np.linalg.norm(X))
    out = np.eye(n, dtype=complex)
    term = np.eye(n, dtype=complex)
    if a == 0.0:
        return out, 0
    for k in range(1, max_terms + 1):
        term = term @ X / k
        out = out + term
        ratio = a / (k + 2)
        if ratio < 1:
            tail = np.linalg.norm(term) * a / (k + 1) / (1 - ratio)
            if tail <= tol:
                return out, k
    raise SmallnessError("smallness violated: exponential series did not certify in "
                         f"{max_terms} terms (|X|_F={a:.3g})")


def exp_op(X: LatticeOperator, tol: float = 1e-14, delta: float | None = 0.1,
           idx: DecayIndex = DecayIndex(0.0, DEFAULT_S0), max_terms: int = 60) -> LatticeOperator:
    """Phi = exp(X) on the zero-average subspace.

    ``delta`` is the decay-norm smallness threshold; pass None to rely on
    the series certificate alone.
    """
    if delta is not None:
        size = decay_norm(X, idx)
        if size > delta:
            raise SmallnessError(f"smallness violated: |X|_{{{idx.m},{idx.s}}}={size:.3g} > {delta}")
    lat = X.lattice
    mask = lat.mask
    sub = X.entries[np.ix_(mask, mask)]
    E, _ = expm_series(sub, tol=tol, max_terms=max_terms)
    full = np.zeros((lat.size, lat.size), complex)
    full[np.ix_(mask, mask)] = E
    return LatticeOperator(full, lat, X.is_restriction_of_mp)


def multiplication_operator(a: TravelingField) -> LatticeOperator:
    """h -> Pi_0^perp (a h) on the traveling lattice, truncated."""
    lat = a.lattice
    a_big = lat.embed(a.dense, 2 * lat.K).ravel()
    A = a_big[lat.diff_index]
    return LatticeOperator(A, lat)


def convolution_matrix(coeff_big: np.ndarray, lat: Lattice) -> np.ndarray:
    """Matrix of h -> coeff * h for coefficients on the doubled box (flat)."""
    return coeff_big[lat.diff_index]


def fitted_constant(lhs, rhs) -> float:
    lhs = np.asarray(lhs, float)
    rhs = np.asarray(rhs, float)
    ok = rhs > 0
    return float(np.max(lhs[ok] / rhs[ok])) if np.any(ok) else 0.0


def random_operator(rng: np.random.Generator, lat: Lattice, decay: float = 1.0,
                    density: float = 1.0, scale: float = 1.0, order: float = 0.0) -> LatticeOperator:
    """Random real operator with off-diagonal exponential decay."""
    n = lat.size
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    A *= np.exp(-decay * (lat.diff_bracket - 1))
    if density < 1.0:
        A *= rng.random((n, n)) < density
    A *= np.maximum(1, lat.j_sup)[None, :].astype(float) ** order
    A = scale * realify(A, lat)
    return LatticeOperator(A, lat)


__all__ = [
    "LatticeOperator", "DecayIndex", "SmallnessError", "decay_norm", "decay_norm_matrix",
    "compose", "exp_op", "expm_series", "diag_part", "phi_average", "phi_average_is_diagonal",
    "structure_check", "op_project", "multiplication_operator", "random_operator",
    "operator_norm", "commutator", "realify", "projection_mask", "convolution_matrix",
]
