"""Time-domain checks of constructed solutions.

The PDE  d_t v + beta tL v + u.grad v = lam^alpha f(lam omega t, x)  is
integrated pseudo-spectrally on an n x n grid with classical RK4 in
integrating-factor form: the beta tL flow is applied exactly, the forcing
is evaluated exactly at each stage time, and u.grad v is dealiased by the
2/3 rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lattice import Lattice, TravelingField, parity
from .model import ProblemConfig, tL_diag

NOT_APPLICABLE = "not applicable — reversibility not asserted"


class CFLError(ValueError):
    pass


class BlowupError(FloatingPointError):
    pass


# grid ---------------------------------------------------------------------------------

class SpectralGrid:
    """n x n periodic grid with wavenumbers j in [-n/2, n/2)."""

    def __init__(self, n: int):
        self.n = n
        k = np.fft.fftfreq(n, 1.0 / n)
        self.k1, self.k2 = np.meshgrid(k, k, indexing="ij")
        self.ksq = self.k1 ** 2 + self.k2 ** 2
        self.inv_ksq = np.where(self.ksq > 0, 1.0 / np.where(self.ksq > 0, self.ksq, 1), 0.0)
        self.tl = 1j * self.k1 * self.inv_ksq        # symbol of tL = d_x1 (-Delta)^-1
        cut = n / 3.0
        self.dealias = (np.abs(self.k1) < cut) & (np.abs(self.k2) < cut)
        x = 2 * np.pi * np.arange(n) / n
        self.x1, self.x2 = np.meshgrid(x, x, indexing="ij")

    @classmethod
    def for_lattice(cls, K: int) -> "SpectralGrid":
        return cls(4 * (2 * K + 1))

    def to_grid(self, vh: np.ndarray) -> np.ndarray:
        return np.real(np.fft.ifft2(vh)) * self.n ** 2

    def to_spec(self, v: np.ndarray) -> np.ndarray:
        return np.fft.fft2(v) / self.n ** 2

    def index(self, j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        j = np.asarray(j, np.int64)
        return j[..., 0] % self.n, j[..., 1] % self.n

    def velocity(self, vh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """u = grad^perp (-Delta)^-1 v in spectrum: u = i(-k2, k1) v / |k|^2."""
        return -1j * self.k2 * self.inv_ksq * vh, 1j * self.k1 * self.inv_ksq * vh

    def advection(self, ah: np.ndarray, bh: np.ndarray) -> np.ndarray:
        """Dealiased spectrum of B[a].grad b."""
        ah = ah * self.dealias
        bh = bh * self.dealias
        u1, u2 = self.velocity(ah)
        prod = (self.to_grid(u1) * self.to_grid(1j * self.k1 * bh)
                + self.to_grid(u2) * self.to_grid(1j * self.k2 * bh))
        out = self.to_spec(prod) * self.dealias
        out[0, 0] = 0.0
        return out

    def l2(self, vh: np.ndarray) -> float:
        return float(np.sqrt(np.sum(np.abs(vh) ** 2)))

    def high_energy_share(self, vh: np.ndarray) -> float:
        """Share of |v|^2 in the upper third of the spectrum."""
        e = np.abs(vh) ** 2
        tot = e.sum()
        return float(e[~self.dealias].sum() / tot) if tot > 0 else 0.0


@dataclass
class GridSnapshot:
    t: float
    spec: np.ndarray
    grid: SpectralGrid
    forcing: Callable[[float], np.ndarray] | None = field(default=None, repr=False)

    @property
    def values(self) -> np.ndarray:
        return self.grid.to_grid(self.spec)

    @classmethod
    def from_values(cls, v: np.ndarray, t: float = 0.0, forcing=None) -> "GridSnapshot":
        g = SpectralGrid(v.shape[0])
        vh = g.to_spec(v)
        vh[0, 0] = 0.0
        return cls(t, vh, g, forcing)

    def roundtrip_error(self) -> float:
        back = self.grid.to_spec(self.values)
        return float(np.max(np.abs(back - self.spec)) / max(np.max(np.abs(self.spec)), 1e-300))


def field_spectrum(f: TravelingField, grid: SpectralGrid, t: float, lam: float, omega) -> np.ndarray:
    """Spatial spectrum of f(lam omega t, .) on the grid."""
    lat = f.lattice
    phase = np.exp(1j * lam * t * (lat.modes @ np.asarray(omega, float)))
    out = np.zeros((grid.n, grid.n), complex)
    i1, i2 = grid.index(lat.j)
    np.add.at(out, (i1, i2), f.flat * phase)
    out[0, 0] = 0.0
    return out


def snapshot_of(f: TravelingField, cfg: ProblemConfig, omega, t: float = 0.0,
                grid: SpectralGrid | None = None, forcing: TravelingField | None = None) -> GridSnapshot:
    grid = grid or SpectralGrid.for_lattice(f.K_trunc)
    fc = cfg.forcing if forcing is None else forcing
    amp = cfg.lam ** cfg.alpha
    return GridSnapshot(t, field_spectrum(f, grid, t, cfg.lam, omega), grid,
                        lambda s: amp * field_spectrum(fc, grid, s, cfg.lam, omega))


# integrator ------------------------------------------------------------------------------

def cfl_limit(vh: np.ndarray, grid: SpectralGrid, cfg: ProblemConfig, omega) -> float:
    u1, u2 = grid.velocity(vh)
    umax = max(np.max(np.abs(grid.to_grid(u1))), np.max(np.abs(grid.to_grid(u2))))
    return 0.2 / (cfg.lam * np.linalg.norm(omega) + umax * grid.n)


def timestep(v0: GridSnapshot, cfg: ProblemConfig, omega, T: float, dt: float,
             times: Sequence[float] | None = None, nonlinear: bool = True,
             check_cfl: bool = True) -> list[GridSnapshot]:
    """Integrating-factor RK4 from v0.t to v0.t + T; snapshots at ``times``."""
    grid = v0.grid
    if dt <= 0 or T < 0:
        raise ValueError("dt must be positive and T non-negative")
    if check_cfl:
        lim = cfl_limit(v0.spec, grid, cfg, omega)
        if dt > lim * (1 + 1e-12):
            raise CFLError(f"CFL violation: dt={dt:.3g} > {lim:.3g}")
    n_steps = int(np.ceil(T / dt - 1e-9))
    h = T / n_steps if n_steps else 0.0
    t0 = v0.t
    want = sorted(set([t0 + T] if times is None else [t0 + float(s) for s in times]))
    lin = -cfg.beta_rot * grid.tl                              # d_t v = -beta tL v

    def E(s):
        return np.exp(lin * s)

    force = v0.forcing or (lambda s: 0.0)

    def rhs(s, vh):
        out = force(s)
        if nonlinear:
            out = out - grid.advection(vh, vh)
        return out

    vh = v0.spec.copy()
    t = t0
    out = []
    wi = 0
    while wi < len(want) and want[wi] <= t0 + 1e-15:
        out.append(GridSnapshot(t0, vh.copy(), grid, v0.forcing))
        wi += 1
    Eh2, Eh = E(h / 2), E(h)
    for step in range(n_steps):
        k1 = rhs(t, vh)
        k2 = rhs(t + h / 2, Eh2 * (vh + h / 2 * k1))
        k3 = rhs(t + h / 2, Eh2 * vh + h / 2 * k2)
        k4 = rhs(t + h, Eh * vh + h * Eh2 * k3)
        vh = Eh * vh + h / 6 * (Eh * k1 + 2 * Eh2 * (k2 + k3) + k4)
        vh[0, 0] = 0.0
        t = t0 + (step + 1) * h
        if not np.all(np.isfinite(vh)):
            raise BlowupError(f"NaN or overflow at t={t:.3g}")
        while wi < len(want) and want[wi] <= t + 1e-12 * max(1.0, abs(t)):
            if abs(want[wi] - t) > 1e-9 * max(h, 1e-300) and want[wi] < t:
                raise ValueError("requested snapshot time is not on the step grid")
            out.append(GridSnapshot(t, vh.copy(), grid, v0.forcing))
            wi += 1
    return out


# residual and defect ------------------------------------------------------------------

def full_residual(w: TravelingField, cfg: ProblemConfig, omega, forcing: TravelingField | None = None) -> float:
    """L2 norm of lam^theta F(w) with the untruncated nonlinearity (doubled box)."""
    from .model import functional_F

    lat = w.lattice
    K2 = 2 * lat.K
    big = TravelingField(lat.embed(w.dense, K2), K2, lat.momentum)
    fc = cfg.forcing if forcing is None else forcing
    fb = TravelingField(fc.lattice.embed(fc.dense, K2), K2, fc.momentum)
    F = functional_F(big, cfg, omega, forcing=fb)
    return float(cfg.lam ** cfg.theta * np.linalg.norm(F.flat))


@dataclass
class ValidationReport:
    times: np.ndarray
    defect: np.ndarray
    energy: np.ndarray
    enstrophy: np.ndarray
    rho: float
    rho_parts: dict
    high_share: float
    dt: float
    passed: bool

    def rows(self) -> list[dict]:
        return [{"t": float(t), "defect": float(d), "energy": float(e), "enstrophy": float(z)}
                for t, d, e, z in zip(self.times, self.defect, self.energy, self.enstrophy)]

    def summary(self) -> dict:
        return {"max_defect": float(self.defect.max()), "rho": self.rho, "ratio": float(self.defect.max() / self.rho)
                if self.rho > 0 else float("inf"), "rho_parts": self.rho_parts, "high_share": self.high_share,
                "dt": self.dt, "passed": self.passed, "dealias_flag": self.high_share > 1e-6}


def _energy(vh: np.ndarray, grid: SpectralGrid) -> tuple[float, float]:
    u1, u2 = grid.velocity(vh)
    return (0.5 * float(np.sum(np.abs(u1) ** 2 + np.abs(u2) ** 2)), 0.5 * float(np.sum(np.abs(vh) ** 2)))


def validate_solution(w: TravelingField, cfg: ProblemConfig, omega, T: float | None = None,
                      n_out: int = 11, dt: float | None = None, factor: float = 10.0) -> ValidationReport:
    """Integrate from v_lam(0, .) and compare with v_lam(lam omega t, .).

    The proxy rho = T ||lam^theta F(w)||_L2 / ||v_lam||_L2 + step-doubling
    error bounds the defect expected from the residual of w (untruncated
    nonlinearity) and from the integrator itself.
    """
    omega = np.asarray(omega, float)
    T = 10.0 / cfg.lam if T is None else T
    v = cfg.lam ** cfg.theta * w
    grid = SpectralGrid.for_lattice(w.K_trunc)
    s0 = snapshot_of(v, cfg, omega, 0.0, grid)
    if dt is None:
        dt = 0.5 * cfl_limit(s0.spec, grid, cfg, omega)
    n = max(int(np.ceil(T / dt)), n_out - 1)
    n = int(np.ceil(n / (n_out - 1)) * (n_out - 1))
    dt = T / n
    times = np.linspace(0.0, T, n_out)
    traj = timestep(s0, cfg, omega, T, dt, times)
    half = timestep(s0, cfg, omega, T, dt / 2, [T])[-1]
    norm_v = grid.l2(s0.spec)
    defect, en, ens = [], [], []
    high = 0.0
    for snap in traj:
        exact = field_spectrum(v, grid, snap.t, cfg.lam, omega)
        defect.append(grid.l2(snap.spec - exact) / norm_v)
        e, z = _energy(snap.spec, grid)
        en.append(e)
        ens.append(z)
        high = max(high, grid.high_energy_share(snap.spec))
    r_full = full_residual(w, cfg, omega)
    parts = {"residual_term": T * r_full / norm_v,
             "integrator_term": grid.l2(traj[-1].spec - half.spec) / norm_v * 16 / 15,
             "F_full_L2": r_full}
    rho = parts["residual_term"] + parts["integrator_term"]
    defect = np.array(defect)
    return ValidationReport(times, defect, np.array(en), np.array(ens), rho, parts, high, dt,
                            bool(defect.max() <= factor * rho))


# linear stability ---------------------------------------------------------------------------

def x_operator(A: np.ndarray, lat: Lattice, phi) -> np.ndarray:
    """Operator on spatial modes at angle phi from a momentum-preserving lattice matrix."""
    ph = np.exp(1j * (lat.modes @ np.asarray(phi, float)))
    return A * ph[:, None] * np.conj(ph)[None, :]


def stability_probe(solution, cfg: ProblemConfig, omega, T: float | None = None, seed: int = 0,
                    state=None, n_out: int = 41, reversible: bool | None = None) -> dict:
    """Spectral and dynamical stability checks on a reversible run.

    ``solution`` is a NashMoserRun or a TravelingField w.  The dynamical
    check integrates d_t h + L(lam omega t) h = 0 for the lattice x-operator
    L(phi) = beta tL + lam^theta (a0.grad + E0) at phi, from a random h(0).
    W(phi) conjugates this flow to the isometric flow of diag(mu_inf) up to
    the final remainder, so the growth ratio is bounded by
    sup_t |W(lam omega t)| |W(0)^-1| (1 + 10 r), r = T |E_inf|.
    """
    from .model import linearized_L
    from .reduce import reduce_linearized

    w = getattr(solution, "w", solution)
    omega = np.asarray(omega, float)
    if reversible is None:
        reversible = bool(cfg.forcing_even)
    if not reversible or (np.any(w.flat) and parity(w, rtol=1e-10) != "odd"):
        return {"status": NOT_APPLICABLE}
    lat = w.lattice
    T = 20.0 / cfg.lam if T is None else T
    mu = None
    if state is None:
        if not np.any(w.flat):
            mu = 1j * cfg.beta_rot * tL_diag(lat)
        else:
            _, state = reduce_linearized(w, cfg, omega, reversible=True)
    if state is not None:
        mu = state.mu
    if mu is None:
        raise ValueError("missing mu_inf")
    m = lat.mask
    re_max = float(np.max(np.abs(mu[m].real))) if m.any() else 0.0
    spectral_ok = re_max <= 1e-8 * cfg.lam ** cfg.theta
    L = linearized_L(w, cfg, omega).entries
    od = 1j * cfg.lam * (lat.modes @ omega)
    Lx = (L - np.diag(od))[np.ix_(m, m)]
    modes = lat.modes[m]
    rng = np.random.default_rng(seed)
    h0 = rng.standard_normal(m.sum()) + 1j * rng.standard_normal(m.sum())
    neg = lat.neg
    full = np.zeros(lat.size, complex)
    full[m] = h0
    full = 0.5 * (full + np.conj(full[neg]))            # real-valued h(0)
    h = full[m]
    n0 = np.linalg.norm(h)
    lam_w = cfg.lam * omega

    def phased(A, t):
        ph = np.exp(1j * t * (modes @ lam_w))
        return A * ph[:, None] * np.conj(ph)[None, :]

    def Lop(t):
        return phased(Lx, t)

    lim = 0.2 / max(np.abs(Lx).sum(axis=1).max() + cfg.lam * np.linalg.norm(omega), 1e-300)
    n_steps = int(np.ceil(T / lim))
    n_steps = int(np.ceil(n_steps / (n_out - 1)) * (n_out - 1))
    dt = T / n_steps
    ratios = [1.0]
    t = 0.0
    for k in range(n_steps):
        k1 = -Lop(t) @ h
        k2 = -Lop(t + dt / 2) @ (h + dt / 2 * k1)
        k3 = -Lop(t + dt / 2) @ (h + dt / 2 * k2)
        k4 = -Lop(t + dt) @ (h + dt * k3)
        h = h + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = (k + 1) * dt
        ratios.append(float(np.linalg.norm(h) / n0))
    sup_ratio = max(ratios)
    if state is not None:
        W, Winv = state.W()
        Wm, Wim = W[np.ix_(m, m)], Winv[np.ix_(m, m)]
        ts = np.linspace(0.0, T, n_out)
        supW = max(np.linalg.norm(phased(Wm, s), 2) for s in ts)
        kappa = float(supW * np.linalg.norm(Wim, 2))
        r = float(T * np.linalg.norm(state.remainder, 2))
    else:
        kappa, r = 1.0, 0.0
    bound = kappa * (1 + 10 * r)
    return {"status": "ok", "max_re_mu": re_max, "re_mu_tol": 1e-8 * cfg.lam ** cfg.theta,
            "spectral_ok": bool(spectral_ok), "sup_ratio": sup_ratio, "kappa_W": kappa,
            "remainder": r, "bound": bound, "dynamical_ok": bool(sup_ratio <= bound),
            "odd_defect": float(np.max(np.abs(mu[m] + mu[neg][m]))) if m.any() else 0.0,
            "T": T, "dt": dt}


__all__ = ["SpectralGrid", "GridSnapshot", "timestep", "snapshot_of", "field_spectrum", "cfl_limit",
           "validate_solution", "ValidationReport", "stability_probe", "full_residual", "x_operator",
           "CFLError", "BlowupError", "NOT_APPLICABLE"]
