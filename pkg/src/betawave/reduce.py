"""Reduction of the linearized operator to constant coefficients.

Three stages act on L = lam omega.d_phi + beta tL + lam^theta (a0.grad + E0):

* transport straightening: a torus diffeomorphism x -> x + beta(phi, x)
  conjugates lam(omega.d_phi + eps a0.grad) to lam omega.d_phi;
* order lowering: exp(X_m) removes the phi-dependence of the remainder
  one order at a time;
* KAM: exp(Psi_n) steps diagonalize what is left, quadratically.

Traveling functions u(phi, x) = u(phi - pi x) are handled on the theta
torus T^nu, where the diffeomorphism is G(theta) = theta - pi beta(theta).
The straightening stage is implemented for nu = 2.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .diophantine import (ResonanceError, gamma_schedule, melnikov1_violation,
                          melnikov2_violation, mu_table)
from .lattice import Lattice, TravelingField, sobolev_norm_flat
from .model import ProblemConfig, linear_parts, linearized_L, tL_diag
from .opalg import (DecayIndex, LatticeOperator, SmallnessError, decay_norm_matrix, expm_series,
                    projection_mask, structure_check)

log = logging.getLogger(__name__)

MELNIKOV_GAMMA_FACTOR = 0.25


class AliasingError(RuntimeError):
    pass


# torus grid helpers ----------------------------------------------------------------

class _Torus:
    """Coefficient boxes |l| <= Kc on T^2 and an oversampled uniform grid."""

    def __init__(self, Kc: int, n_grid: int):
        self.Kc = Kc
        self.n = n_grid
        self.k = np.arange(-Kc, Kc + 1)
        t = 2 * np.pi * np.arange(n_grid) / n_grid
        T1, T2 = np.meshgrid(t, t, indexing="ij")
        self.points = np.stack([T1.ravel(), T2.ravel()], axis=1)
        K1, K2 = np.meshgrid(self.k, self.k, indexing="ij")
        self.modes = np.stack([K1.ravel(), K2.ravel()], axis=1)
        self.sup = np.abs(self.modes).max(axis=1)

    def to_grid(self, C: np.ndarray) -> np.ndarray:
        """Coefficients (..., 2Kc+1, 2Kc+1) -> grid values (..., n, n)."""
        n, Kc = self.n, self.Kc
        lead = C.shape[:-2]
        F = np.zeros(lead + (n, n), complex)
        idx = self.k % n
        F[(Ellipsis,) + np.ix_(idx, idx)] = C
        return np.fft.ifft2(F) * n * n

    def to_coeffs(self, U: np.ndarray, Kc: int | None = None) -> np.ndarray:
        Kc = self.Kc if Kc is None else Kc
        n = self.n
        F = np.fft.fft2(U) / (n * n)
        idx = np.arange(-Kc, Kc + 1) % n
        return F[(Ellipsis,) + np.ix_(idx, idx)]

    def spectrum_tail(self, U: np.ndarray, frac: float = 0.9) -> float:
        """Share of coefficient mass above frac * Nyquist."""
        n = self.n
        F = np.abs(np.fft.fft2(U)) ** 2
        k = np.fft.fftfreq(n, 1.0 / n)
        K1, K2 = np.meshgrid(k, k, indexing="ij")
        high = np.maximum(np.abs(K1), np.abs(K2)) > frac * n / 2
        tot = F.sum()
        return float(F[..., high].sum() / tot) if tot > 0 else 0.0

    def evaluate(self, C: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Nonuniform evaluation of sum C[a,b] e^{i(k_a p1 + k_b p2)}."""
        E1 = _powers(pts[:, 0], self.Kc)
        E2 = _powers(pts[:, 1], self.Kc)
        if C.ndim == 2:
            return np.sum((E1 @ C) * E2, axis=1)
        return np.stack([np.sum((E1 @ c) * E2, axis=1) for c in C])


def _powers(t: np.ndarray, Kc: int) -> np.ndarray:
    """e^{ikt} for k = -Kc..Kc by repeated multiplication, shape (len(t), 2Kc+1)."""
    z = np.exp(1j * t)
    out = np.empty((len(t), 2 * Kc + 1), complex)
    out[:, Kc] = 1.0
    for k in range(1, Kc + 1):
        out[:, Kc + k] = out[:, Kc + k - 1] * z
    out[:, :Kc] = np.conj(out[:, :Kc:-1])
    return out


def _grid_size(Kc: int, oversample: int = 2) -> int:
    return oversample * (2 * Kc + 1)


# transport straightening ----------------------------------------------------------------

@dataclass
class StraighteningResult:
    beta_map: np.ndarray
    breve_beta_map: np.ndarray
    B_op: LatticeOperator
    B_inv_op: LatticeOperator
    m_history: list[np.ndarray]
    residual_history: list[float]
    b_norms: list[float]
    iterations: int
    K_work: int
    G_grid: np.ndarray | None = None
    Ginv_grid: np.ndarray | None = None
    torus: _Torus | None = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else 0.0

    def summary(self) -> dict:
        return {"iterations": self.iterations, "K_work": self.K_work,
                "m_history": [np.abs(m).max() for m in self.m_history],
                "residual_history": self.residual_history, "b_norms": self.b_norms,
                **self.diagnostics}


def _vel_coeffs(w: TravelingField, Kc: int) -> np.ndarray:
    """Coefficients of a0 = B[w] as (2, box) on the |l| <= Kc box."""
    lat = w.lattice
    big = Lattice(Kc, lat.momentum)
    wb = lat.embed(w.dense, Kc).ravel()
    out = np.zeros((2, big.size), complex)
    m = big.mask
    out[0, m] = -1j * big.j[m, 1] / big.j_sq[m] * wb[m]
    out[1, m] = 1j * big.j[m, 0] / big.j_sq[m] * wb[m]
    return out.reshape((2,) + big.shape)


def _fixed_point_inverse(tor: _Torus, beta_c: np.ndarray, P: np.ndarray, pts: np.ndarray,
                         tol: float = 1e-15, max_iter: int = 200) -> np.ndarray:
    """Solve bt = -beta(psi - P^T bt) pointwise; returns bt (npts, 2)."""
    piT = P.T.astype(float)          # (pi y)_k = jbar_k . y
    bt = np.zeros((len(pts), 2))
    for _ in range(max_iter):
        arg = pts - bt @ piT.T
        new = -np.real(tor.evaluate(beta_c, arg)).T
        err = np.max(np.abs(new - bt))
        bt = new
        if err < tol:
            break
    else:
        raise RuntimeError("inverse diffeomorphism fixed point did not converge")
    return bt


def straighten_transport(w: TravelingField, cfg: ProblemConfig, omega, n_iters: int = 12,
                         tol: float = 1e-13, K_work: int | None = None, oversample: int = 2,
                         build_operators: bool = True) -> StraighteningResult:
    """Quadratic straightening of omega.d_phi + eps a0.grad on the theta torus."""
    if cfg.nu != 2:
        raise NotImplementedError("transport straightening is implemented for nu = 2")
    lat = w.lattice
    P = lat.momentum.matrix                       # 2 x nu, columns jbar_k
    piT = P.T.astype(float)
    omega = np.asarray(omega, float)
    Kw = 3 * lat.K if K_work is None else K_work
    tor = _Torus(Kw, _grid_size(Kw, oversample))
    wlat = Lattice(Kw, lat.momentum)
    jw = wlat.j.reshape(wlat.shape + (2,))
    lsup = wlat.l_sup.reshape(wlat.shape)
    ell_dot = (wlat.modes @ omega).reshape(wlat.shape)
    floor = cfg.gamma * np.maximum(1, lsup).astype(float) ** (-cfg.tau)
    zero = (lsup == 0)

    b = cfg.eps * _vel_coeffs(w, Kw)
    m = np.zeros(2)
    m_hist, res_hist, b_norms, betas = [m.copy()], [], [], []
    s0 = cfg.s0

    def vnorm(c, mvec=None):
        flat = c.reshape(2, -1).copy()
        if mvec is not None:
            flat[:, wlat.index(np.zeros(2, int))] += mvec
        return float(np.sqrt(sum(sobolev_norm_flat(f, wlat, s0) ** 2 for f in flat)))

    b_norms.append(vnorm(b))
    n_done = 0
    max_tail = 0.0
    trunc_tail = 0.0
    if b_norms[0] == 0.0:
        res_hist.append(0.0)
    for n in range(n_iters):
        if b_norms[-1] == 0.0 or (res_hist and res_hist[-1] < tol):
            break
        Nn = cfg.N0 ** (cfg.chi ** n)
        div = ell_dot + jw @ m
        keep = (lsup <= Nn) & ~zero
        bad = keep & (np.abs(div) < floor) & (np.abs(b).max(axis=0) > 0)
        if np.any(bad):
            ell = tuple(int(x) for x in wlat.modes[np.flatnonzero(bad.ravel())[0]])
            raise ResonanceError(f"transport divisor floor violated at l={ell}", where=ell)
        beta = np.zeros_like(b)
        beta[:, keep] = -b[:, keep] / (1j * div[keep])
        mean = np.real(b[:, zero][:, 0])
        # r = Pi^perp b + b . grad beta, products on the grid
        low = np.where(keep | zero, 1, 0)
        r_c = b * (1 - low)
        Bg = np.real(tor.to_grid(b))
        grad = [np.real(tor.to_grid(1j * jw[..., c] * beta)) for c in range(2)]   # d/dx_c beta
        prod = Bg[0] * grad[0] + Bg[1] * grad[1]                                     # (2, n, n)
        r_grid = np.real(tor.to_grid(r_c)) + prod
        r_full = tor.to_coeffs(r_grid, Kw)
        # b_{n+1} = r o G_n^{-1}
        bt = _fixed_point_inverse(tor, np.real_if_close(beta), P, tor.points)
        ginv = tor.points - bt @ piT.T
        vals = np.real(tor.evaluate(r_full, ginv)).reshape(2, tor.n, tor.n)
        max_tail = max(max_tail, tor.spectrum_tail(vals))
        if max_tail > 1e-6:
            raise AliasingError(f"quadrature aliasing: {max_tail:.2e} of mass above 90% Nyquist")
        b_new = tor.to_coeffs(vals, Kw)
        full_mass = float(np.sum(np.abs(vals) ** 2)) / tor.n ** 2
        kept_mass = float(np.sum(np.abs(b_new) ** 2))
        if full_mass > 0:
            trunc_tail = max(trunc_tail, max(0.0, 1 - kept_mass / full_mass))
        b_new = 0.5 * (b_new + np.conj(b_new[:, ::-1, ::-1]))
        m = m + mean
        betas.append(beta)
        b = b_new
        m_hist.append(m.copy())
        b_norms.append(vnorm(b))
        res_hist.append(vnorm(b, m))
        n_done += 1

    res = StraighteningResult(
        beta_map=np.zeros((2,) + wlat.shape), breve_beta_map=np.zeros((2,) + wlat.shape),
        B_op=LatticeOperator.identity(lat), B_inv_op=LatticeOperator.identity(lat),
        m_history=m_hist, residual_history=res_hist, b_norms=b_norms, iterations=n_done,
        K_work=Kw, torus=tor)
    res.diagnostics.update({"aliasing_tail": max_tail, "truncation_tail": trunc_tail,
                            "smallness": cfg.N0 * cfg.eps / cfg.gamma})
    if n_done == 0:
        res.G_grid = tor.points.copy()
        res.Ginv_grid = tor.points.copy()
        return res
    # total map G = G_n o ... o G_0 on the grid
    pts = tor.points.copy()
    for beta in betas:
        pts = pts - np.real(tor.evaluate(beta, pts)).T @ piT.T
    alpha_pts = np.linalg.solve(piT, (tor.points - pts).T)          # pi alpha = theta - G(theta)
    alpha_c = np.real_if_close(tor.to_coeffs(alpha_pts.reshape(2, tor.n, tor.n), Kw))
    bt = _fixed_point_inverse(tor, alpha_c, P, tor.points)
    ginv = tor.points - bt @ piT.T
    res.beta_map = alpha_c
    res.breve_beta_map = tor.to_coeffs(bt.T.reshape(2, tor.n, tor.n), Kw)
    res.G_grid = pts
    res.Ginv_grid = ginv
    if build_operators:
        B, Binv_map = composition_operators(res, lat)
        Bsub = B[np.ix_(lat.mask, lat.mask)]
        Binv = np.zeros_like(B)
        Binv[np.ix_(lat.mask, lat.mask)] = np.linalg.inv(Bsub)
        res.B_op = LatticeOperator(B, lat)
        res.B_inv_op = LatticeOperator(Binv, lat)
        res.diagnostics["composition_inverse_defect"] = float(
            np.linalg.norm(Binv_map[np.ix_(lat.mask, lat.mask)] @ Bsub - np.eye(int(lat.mask.sum()))))
    res.diagnostics["function_residual"] = transport_function_residual(res, w, cfg, omega)
    return res


def composition_operators(res: StraighteningResult, lat: Lattice) -> tuple[np.ndarray, np.ndarray]:
    """Matrices of h -> h o G and h -> h o G^{-1} on the lattice, zero-average block."""
    tor = res.torus
    n, K = tor.n, lat.K
    out = []
    for pts in (res.G_grid, res.Ginv_grid):
        M = np.zeros((lat.size, lat.size), complex)
        G1 = pts[:, 0].reshape(n, n)
        G2 = pts[:, 1].reshape(n, n)
        ks = np.arange(-K, K + 1)
        E2 = np.exp(1j * ks[:, None, None] * G2[None])           # (2K+1, n, n)
        for a, k1 in enumerate(ks):
            vals = np.exp(1j * k1 * G1)[None] * E2                 # columns l' = (k1, k2)
            C = tor.to_coeffs(vals, K).reshape(len(ks), -1)        # (2K+1, size)
            cols = a * len(ks) + np.arange(len(ks))
            M[:, cols] = C.T
        M[~lat.mask, :] = 0
        M[:, ~lat.mask] = 0
        out.append(M)
    return out[0], out[1]


def transport_function_residual(res: StraighteningResult, w: TravelingField, cfg: ProblemConfig,
                                omega) -> float:
    """|| [omega.d_phi alpha + b + (b.grad) alpha] o G^{-1} ||_{s0} from the total map alone.

    The norm is taken over the active lattice, where the s0 weights do not
    amplify round-off in the far tail of the working box.

    This is the vector field left after conjugating omega.d_phi + b.grad by
    the composed diffeomorphism; it is computed independently of the
    per-step recursion.
    """
    tor = res.torus
    Kw = res.K_work
    wlat = Lattice(Kw, w.lattice.momentum)
    jw = wlat.j.reshape(wlat.shape + (2,))
    a = res.beta_map
    b = cfg.eps * _vel_coeffs(w, Kw)
    ell = wlat.modes.reshape(wlat.shape + (2,))
    dphi = 1j * (ell @ np.asarray(omega, float)) * a
    grad = [np.real(tor.to_grid(1j * jw[..., c] * a)) for c in range(2)]
    Bg = np.real(tor.to_grid(b))
    r_grid = np.real(tor.to_grid(dphi + b)) + Bg[0] * grad[0] + Bg[1] * grad[1]
    r_c = tor.to_coeffs(r_grid, Kw)
    vals = np.real(tor.evaluate(r_c, res.Ginv_grid)).reshape(2, tor.n, tor.n)
    lat = w.lattice
    rc = tor.to_coeffs(vals, lat.K).reshape(2, -1)
    return float(np.sqrt(sum(sobolev_norm_flat(f, lat, cfg.s0) ** 2 for f in rc)))


def padded_conjugation(st: StraighteningResult, w: TravelingField, cfg: ProblemConfig, omega,
                       K_pad: int | None = None) -> dict:
    """Independent assemblies of the conjugated operators on a padded lattice.

    B and B^{-1} are the composition matrices of G and G^{-1} on |l| <= K_pad
    (no matrix inversion).  Returned blocks are restricted to the active
    lattice:

    * ``transport``: B^{-1}(lam omega.d_phi + lam^theta a0.grad)B, which should
      equal lam omega.d_phi;
    * ``L1_raw``: B^{-1} L B;
    * ``E1_formula``: beta(B^{-1} tL B - tL) + lam^theta B^{-1} E0 B, the
      remainder once the transport part is replaced by lam omega.d_phi.
    """
    from .model import _transport_blocks
    lat = w.lattice
    Kp = 2 * lat.K if K_pad is None else K_pad
    plat = Lattice(Kp, lat.momentum)
    wp = TravelingField(lat.embed(w.dense, Kp), Kp, lat.momentum)
    B, Bi = composition_operators(st, plat)
    A, E0 = _transport_blocks(wp)
    od = 1j * cfg.lam * (plat.modes @ np.asarray(omega, float))
    tl = np.diag(1j * cfg.beta_rot * tL_diag(plat))
    lt = cfg.lam ** cfg.theta
    inner = np.array([plat.index(mm) for mm in lat.modes])
    ix = np.ix_(inner, inner)
    T = Bi @ (np.diag(od) + lt * A) @ B
    L1_raw = Bi @ (np.diag(od) + tl + lt * (A + E0)) @ B
    E1f = (Bi @ tl @ B - tl) + lt * (Bi @ E0 @ B)
    return {"transport": _masked(T[ix], lat), "L1_raw": _masked(L1_raw[ix], lat),
            "E1_formula": _masked(E1f[ix], lat), "omega_d": od[inner], "K_pad": Kp}


def conjugation_oracle(st: StraighteningResult, state: "ReductionState", w: TravelingField,
                       cfg: ProblemConfig, omega, K_pad: int | None = None,
                       interior: int | None = None) -> dict:
    """Agreement of lattice L1, padded raw conjugation and the E1 formula.

    Truncation only affects rows and columns near the lattice edge, so the
    comparison with the lattice L1 uses the interior block |l| <= K/2.
    """
    lat = w.lattice
    pc = padded_conjugation(st, w, cfg, omega, K_pad)
    m = lat.mask
    r = lat.K // 2 if interior is None else interior
    sel = m & (lat.l_sup <= r)
    od = np.diag(pc["omega_d"])
    tl = np.diag(1j * cfg.beta_rot * tL_diag(lat))
    formula = od + tl + pc["E1_formula"]
    L1_lat = state.remainder + np.diag(state.omega_d + state.initial_mu) if state.stage == "transport" else None

    def rel(a, b, s):
        d = np.linalg.norm((a - b)[np.ix_(s, s)])
        return float(d / max(np.linalg.norm(b[np.ix_(s, s)]), 1e-300))

    out = {"transport_residual": float(np.linalg.norm((pc["transport"] - od)[np.ix_(m, m)]) / cfg.lam),
           "formula_vs_raw": rel(formula, pc["L1_raw"], m), "interior": r, "K_pad": pc["K_pad"]}
    if L1_lat is not None:
        out["lattice_vs_raw_interior"] = rel(L1_lat, pc["L1_raw"], sel)
    return out


# reduction state ----------------------------------------------------------------------

@dataclass
class ReductionState:
    stage: str
    lattice: Lattice
    omega_d: np.ndarray            # i lam omega.l per flat index
    mu: np.ndarray                 # mu(j(l)) per flat index
    remainder: np.ndarray          # E, full lattice matrix
    conjugators: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)
    norms: list[dict] = field(default_factory=list)
    melnikov: list[dict] = field(default_factory=list)
    reversible: bool = False
    diagnostics: dict = field(default_factory=dict)
    initial_mu: np.ndarray | None = None

    @property
    def diag_op(self) -> np.ndarray:
        return np.diag(self.omega_d + self.mu)

    def operator(self) -> LatticeOperator:
        return LatticeOperator(self.diag_op + self.remainder, self.lattice)

    @property
    def z(self) -> np.ndarray:
        base = self.initial_mu if self.initial_mu is not None else 0.0
        return self.mu - base

    def mu_dict(self) -> dict:
        return mu_table(self.mu, self.lattice)

    def remainder_op(self) -> LatticeOperator:
        return LatticeOperator(self.remainder, self.lattice)

    def W(self) -> tuple[np.ndarray, np.ndarray]:
        """Accumulated conjugator and its inverse (W maps reduced to original)."""
        n = self.lattice.size
        W = np.eye(n, dtype=complex)
        Winv = np.eye(n, dtype=complex)
        for _, F, Finv in self.conjugators:
            W = W @ F
            Winv = Finv @ Winv
        return W, Winv

    def summary(self) -> dict:
        m = self.lattice.mask
        return {"stage": self.stage, "norms": self.norms, "melnikov": self.melnikov,
                "max_re_mu": float(np.max(np.abs(self.mu[m].real))) if m.any() else 0.0,
                **self.diagnostics}


def _masked(A: np.ndarray, lat: Lattice) -> np.ndarray:
    out = np.array(A, dtype=complex)
    out[~lat.mask, :] = 0
    out[:, ~lat.mask] = 0
    return out


def conjugate_to_L1(straightening: StraighteningResult, w: TravelingField, cfg: ProblemConfig,
                    omega, reversible: bool = False) -> ReductionState:
    """L1 = B^{-1} L B on the zero-average block, split as diagonal + E1."""
    lat = w.lattice
    L = linearized_L(w, cfg, omega).entries
    B = straightening.B_op.entries
    Binv = straightening.B_inv_op.entries
    L1 = _masked(Binv @ L @ B, lat)
    omega_d = 1j * cfg.lam * (lat.modes @ np.asarray(omega, float))
    mu0 = 1j * cfg.beta_rot * tL_diag(lat)
    E1 = L1 - np.diag(omega_d + mu0)
    E1 = _masked(E1, lat)
    st = ReductionState("transport", lat, omega_d, mu0.copy(), E1, reversible=reversible,
                        initial_mu=mu0.copy())
    if straightening.iterations:
        st.conjugators.append(("B", B, Binv))
    idx = DecayIndex(-1.0, cfg.s0)
    st.norms.append({"stage": "L1", "decay_-1": decay_norm_matrix(E1, lat, idx),
                     "frobenius": float(np.linalg.norm(E1))})
    st.diagnostics["E1_over_lam_theta"] = st.norms[-1]["decay_-1"] / cfg.lam ** cfg.theta
    if reversible:
        st.diagnostics["L1_structure"] = structure_check(LatticeOperator(L1, lat), rtol=1e-8)
    return st


# Lie series helpers ---------------------------------------------------------------------

def _ad_series(C: np.ndarray, X: np.ndarray, offset: int, tol: float, max_terms: int = 60) -> np.ndarray:
    """sum_{k>=0} ad_X^k(C)/(k+offset)!  with ad_X(C) = [C, X]."""
    out = C / math.factorial(offset)
    term = C.copy()
    scale = max(np.linalg.norm(C), 1e-300)
    for k in range(1, max_terms):
        term = term @ X - X @ term
        add = term / math.factorial(k + offset)
        out = out + add
        if np.linalg.norm(add) <= tol * scale:
            return out
    raise SmallnessError("smallness violated: Lie series did not converge")


def _conjugate(D: np.ndarray, E: np.ndarray, Y: np.ndarray, X: np.ndarray, tol: float) -> np.ndarray:
    """Remainder of exp(-X)(D + full) exp(X) given [diag part, X] = Y.

    Returns  sum ad^k([Y,X])/(k+2)! + sum ad^k([D,X])/(k+1)! + sum ad^k([E,X])/(k+1)!
    where D holds the diagonal pieces not covered by Y.
    """
    out = np.zeros_like(E)
    for C, off in ((Y @ X - X @ Y, 2), (D @ X - X @ D, 1), (E @ X - X @ E, 1)):
        if np.any(C):
            out = out + _ad_series(C, X, off, tol)
    return out


# order lowering -------------------------------------------------------------------------

def lower_order(state: ReductionState, M: int, cfg: ProblemConfig, omega,
                tol: float = 1e-16, delta: float | None = None) -> ReductionState:
    """Steps m = 1..M-1 of X_m = -offdiag(E)/(i lam omega.(l-l')), exp(X_m) conjugation."""
    lat = state.lattice
    m_need = (1 - cfg.c_small) / (2 * (1 - cfg.c_small) - cfg.alpha)
    state.diagnostics["M"] = M
    state.diagnostics["M_condition"] = bool(M > m_need)
    state.diagnostics["M_uncapped"] = cfg.M_uncapped
    state.diagnostics["M_capped"] = bool(M < cfg.M_uncapped)
    odiff = state.omega_d[:, None] - state.omega_d[None, :]
    off = ~np.eye(lat.size, dtype=bool)
    mask2 = np.outer(lat.mask, lat.mask) & off
    k_sup = lat.diff_sup
    floor = cfg.lam * cfg.gamma * np.maximum(1, k_sup).astype(float) ** (-cfg.tau)
    delta = cfg.exp_delta if delta is None else delta
    prev = None
    for m in range(1, M):
        E = state.remainder
        if not np.any(E):
            state.norms.append({"stage": f"lowering({m})", "decay_-1": 0.0, "X": 0.0})
            continue
        Ed = np.diag(np.diag(E))
        use = mask2 & (E != 0)
        bad = use & (np.abs(odiff) < floor)
        if np.any(bad):
            a, b = np.argwhere(bad)[0]
            k = tuple(int(x) for x in lat.modes[a] - lat.modes[b])
            raise ResonanceError(f"lowering divisor floor violated at l-l'={k}", where=k)
        X = np.zeros_like(E)
        X[use] = -E[use] / odiff[use]
        # the decay-norm threshold is reported; the series certificate is the gate
        xs = decay_norm_matrix(X, lat, DecayIndex(0.0, cfg.s0))
        Phi, _ = expm_series(X, tol=1e-15)
        Phinv, _ = expm_series(-X, tol=1e-15)
        Y0 = -(E - Ed)
        Dp = np.diag(state.mu)
        Enew = _masked(_conjugate(Dp, E, Y0, X, tol), lat)
        state.mu = state.mu + np.diag(Ed)
        state.remainder = Enew
        state.conjugators.append((f"X{m}", _masked(Phi, lat) + np.diag(~lat.mask),
                                  _masked(Phinv, lat) + np.diag(~lat.mask)))
        nrm = decay_norm_matrix(Enew, lat, DecayIndex(-1.0, cfg.s0))
        state.norms.append({"stage": f"lowering({m})", "decay_-1": nrm, "X": xs,
                            "X_over_delta": xs / delta, "frobenius": float(np.linalg.norm(Enew))})
        if prev is not None and nrm > prev:
            log.warning("lowering step %d did not contract: %.3g > %.3g", m, nrm, prev)
        prev = nrm
        state.stage = f"lowering({m})"
    return state


# KAM reducibility -----------------------------------------------------------------------------

def kam_reduce(state: ReductionState, cfg: ProblemConfig, omega, n_steps: int = 8,
               tol: float = 0.0, gamma_factor: float = MELNIKOV_GAMMA_FACTOR,
               norm_index: DecayIndex | None = None, stall_ratio: float = 0.5) -> ReductionState:
    """Quadratic diagonalization of diag(i lam omega.l + mu) + E."""
    lat = state.lattice
    M = state.diagnostics.get("M", cfg.M)
    idx = norm_index or DecayIndex(-float(M), cfg.s0)
    gamma_k = gamma_factor * cfg.gamma
    mask2 = np.outer(lat.mask, lat.mask) & ~np.eye(lat.size, dtype=bool)
    Emax = lat.diff_sup.max()
    e0 = decay_norm_matrix(state.remainder, lat, idx)
    state.norms.append({"stage": "kam(0)", "decay": e0, "frobenius": float(np.linalg.norm(state.remainder))})
    floor_scale = np.finfo(float).eps * cfg.lam * (2 * lat.K + 1)
    for n in range(n_steps):
        E = state.remainder
        en = state.norms[-1]["decay"]
        if en <= tol or not np.any(E):
            break
        Nn = cfg.N0 ** (cfg.chi ** n)
        gn = gamma_schedule(gamma_k, n)
        v = melnikov2_violation(omega, state.mu, cfg, int(min(math.floor(Nn), Emax)), gn, lat)
        state.melnikov.append({"step": n, "N": Nn, "gamma": gn, "violation": v})
        if v is not None:
            raise ResonanceError(f"second Melnikov condition violated at (l, j, j')={v}", where=v)
        d = state.omega_d + state.mu
        div = d[:, None] - d[None, :]
        proj = projection_mask(lat, Nn) & mask2
        Pi = np.where(proj, E, 0)
        Psi = np.zeros_like(E)
        Psi[proj] = -E[proj] / div[proj]
        # divisors actually used never fall below the declared floor
        kk = np.maximum(1, lat.diff_sup).astype(float)
        jp = np.sqrt(np.maximum(lat.j_sq, 1).astype(float))[None, :]
        floor = cfg.lam * gn / (kk ** cfg.tau * jp ** cfg.tau)
        k0 = lat.diff_sup == 0
        used = proj & (E != 0) & ~k0
        assert np.all(np.abs(div[used]) >= floor[used]), "KAM divisor below its floor"
        Ed = np.diag(np.diag(E))
        Y = -Pi
        tail = E - Ed - Pi
        Phi, _ = expm_series(Psi, tol=1e-15)
        Phinv, _ = expm_series(-Psi, tol=1e-15)
        Enew = tail + _conjugate(np.zeros_like(E), E, Y, Psi, 1e-16)
        Enew = _masked(Enew, lat)
        mu_prev = state.mu.copy()
        state.mu = state.mu + np.diag(Ed)
        state.remainder = Enew
        state.conjugators.append((f"Psi{n}", _masked(Phi, lat) + np.diag(~lat.mask),
                                  _masked(Phinv, lat) + np.diag(~lat.mask)))
        e_new = decay_norm_matrix(Enew, lat, idx)
        drift = np.abs(state.mu - mu_prev)
        jsup = np.maximum(1, lat.j_sup).astype(float)
        state.norms.append({"stage": f"kam({n + 1})", "decay": e_new,
                            "frobenius": float(np.linalg.norm(Enew)), "N": Nn,
                            "drift_ratio": float(np.max((drift * jsup ** M)[lat.mask]) / max(en, 1e-300))})
        state.stage = f"kam({n + 1})"
        if np.linalg.norm(Enew) < floor_scale:
            break
        if e_new > stall_ratio * en and Nn >= Emax:
            break
    if state.reversible:
        state.diagnostics["reversible_mu"] = reversible_mu_check(state)
    return state


def reversible_mu_check(state: ReductionState) -> dict:
    lat = state.lattice
    m = lat.mask
    mu = state.mu
    scale = max(float(np.max(np.abs(mu[m]))), 1e-300)
    return {"max_re": float(np.max(np.abs(mu[m].real))),
            "odd_defect": float(np.max(np.abs(mu[m] + mu[lat.neg][m]))),
            "conj_defect": float(np.max(np.abs(mu[m] + np.conj(mu[m])))),
            "scale": scale}


# full chain and inversion -------------------------------------------------------------------

def reduce_linearized(w: TravelingField, cfg: ProblemConfig, omega, reversible: bool = False,
                      kam_steps: int = 8, M: int | None = None, straighten_iters: int = 12,
                      gamma_factor: float = MELNIKOV_GAMMA_FACTOR) -> tuple[StraighteningResult, ReductionState]:
    st = straighten_transport(w, cfg, omega, n_iters=straighten_iters)
    state = conjugate_to_L1(st, w, cfg, omega, reversible=reversible)
    state = lower_order(state, cfg.M if M is None else M, cfg, omega)
    state = kam_reduce(state, cfg, omega, n_steps=kam_steps, gamma_factor=gamma_factor)
    return st, state


@dataclass
class LinearSolveHandle:
    method: str
    lattice: Lattice
    _solve: object
    L: np.ndarray
    info: dict = field(default_factory=dict)

    def solve_flat(self, g: np.ndarray) -> np.ndarray:
        return self._solve(g)

    def solve(self, g: TravelingField) -> TravelingField:
        return TravelingField.from_flat(self._solve(g.flat), g.K_trunc, g.momentum)

    def residual(self, g: TravelingField) -> float:
        h = self._solve(g.flat)
        return float(np.linalg.norm(self.L @ h - g.flat) / max(np.linalg.norm(g.flat), 1e-300))


def invert_linearized(w: TravelingField, cfg: ProblemConfig, omega, method: str = "dense_lu",
                      reversible: bool = False, state: ReductionState | None = None,
                      gamma_factor: float = MELNIKOV_GAMMA_FACTOR, **kw) -> LinearSolveHandle:
    lat = w.lattice
    m = lat.mask
    L = linearized_L(w, cfg, omega).entries
    if method == "dense_lu":
        sub = L[np.ix_(m, m)]
        lu, piv = linalg.lu_factor(sub, check_finite=True)
        if np.any(np.abs(np.diag(lu)) == 0):
            raise np.linalg.LinAlgError("singular matrix")

        def solve(g):
            out = np.zeros(lat.size, complex)
            out[m] = linalg.lu_solve((lu, piv), g[m])
            return out

        return LinearSolveHandle(method, lat, solve, L)
    if method != "reduction_chain":
        raise ValueError(f"unknown inverse method {method!r}")
    if state is None:
        _, state = reduce_linearized(w, cfg, omega, reversible=reversible, gamma_factor=gamma_factor, **kw)
    gk = gamma_factor * cfg.gamma
    v = melnikov1_violation(omega, state.mu, cfg, lat.K, gk, lat)
    state.melnikov.append({"step": "final", "kind": "Melnikov1", "gamma": gk, "violation": v})
    if v is not None:
        raise ResonanceError(f"first Melnikov condition violated at (l, j)={v}", where=v)
    W, Winv = state.W()
    eta = state.omega_d + state.mu

    def solve(g):
        y = Winv @ g
        y[m] = y[m] / eta[m]
        y[~m] = 0
        return W @ y

    info = {"final_remainder": float(np.linalg.norm(state.remainder)),
            "stage": state.stage, "n_conjugators": len(state.conjugators)}
    h = LinearSolveHandle(method, lat, solve, L, info)
    h.state = state
    return h


__all__ = [
    "straighten_transport", "StraighteningResult", "conjugate_to_L1", "ReductionState",
    "lower_order", "kam_reduce", "reduce_linearized", "invert_linearized", "LinearSolveHandle",
    "AliasingError", "composition_operators", "transport_function_residual",
    "reversible_mu_check", "MELNIKOV_GAMMA_FACTOR", "padded_conjugation", "conjugation_oracle",
]
