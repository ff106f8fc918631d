"""Small-divisor linear solver and the approximate-solution recursion."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .diophantine import ResonanceError, admissible, omega_gamma_margins
from .lattice import TravelingField, assert_traveling, parity, sobolev_norm
from .model import ProblemConfig, forward_linear, functional_F, nonlinearity, transport_divisor

log = logging.getLogger(__name__)


class BoundWarning(UserWarning):
    pass


def solve_linear(g: TravelingField, cfg: ProblemConfig, omega, check_bounds: bool = True) -> TravelingField:
    """w = -(lam omega.d_phi + beta tL)^{-1} g, modewise.

    Divisors on the support of g are compared with the certified floor
    lam gamma <l>^-tau; a violation names the mode.
    """
    lat = g.lattice
    d = transport_divisor(lat, cfg, omega)
    support = np.flatnonzero(g.flat)
    floor = cfg.lam * cfg.gamma * np.maximum(1, lat.l_sup).astype(float) ** (-cfg.tau)
    bad = support[np.abs(d[support]) < floor[support]]
    if bad.size:
        ell = tuple(int(x) for x in lat.modes[bad[0]])
        raise ResonanceError(f"non-resonance violated at l={ell}: |divisor|={abs(d[bad[0]]):.3g} "
                             f"< floor {floor[bad[0]]:.3g}", where=ell)
    out = np.zeros(lat.size, complex)
    out[support] = -g.flat[support] / (1j * d[support])
    w = TravelingField.from_flat(out, lat.K, lat.momentum)
    if check_bounds and support.size:
        _check_solver_bounds(g, w, cfg)
    return w


def _check_solver_bounds(g: TravelingField, w: TravelingField, cfg: ProblemConfig,
                         C: float = 1.0) -> None:
    s = cfg.s0
    upper = C * sobolev_norm(g, s + 2 * cfg.tau + 1) / (cfg.lam * cfg.gamma)
    lower = 0.5 * min(1 / cfg.lam, 1 / abs(cfg.beta_rot)) * sobolev_norm(g, s - 1)
    nw = sobolev_norm(w, s)
    if nw > upper * (1 + 1e-12):
        warnings.warn(f"solver upper bound drift: {nw:.3g} > {upper:.3g}", BoundWarning, stacklevel=3)
    if nw < lower * (1 - 1e-12):
        warnings.warn(f"solver lower bound drift: {nw:.3g} < {lower:.3g}", BoundWarning, stacklevel=3)


@dataclass
class ApproxSolution:
    terms: list[TravelingField]
    residuals: list[TravelingField]
    v_app: TravelingField
    q_N: TravelingField
    consistency: float
    norms: list[dict] = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.terms) - 1

    @property
    def ordered(self) -> bool:
        """True when the term norms strictly decrease, ||v_{n+1}|| < ||v_n||."""
        v = [r["v"] for r in self.norms]
        return all(b < a for a, b in zip(v, v[1:]))

    def kappa_N(self, tau: float) -> float:
        return 2 * (self.N + 1) * (tau + 1)

    def summary(self) -> dict:
        return {"N": self.N, "norms": self.norms, "consistency": self.consistency, "ordered": self.ordered,
                "q_N_norm": self.norms[-1]["q"] if self.norms else 0.0}


def build_v_app(cfg: ProblemConfig, omega, N: int | None = None, forcing: TravelingField | None = None,
                s: float | None = None) -> ApproxSolution:
    """v_0 solves the forced linear problem; each v_{n+1} absorbs q_n."""
    if cfg.lam < abs(cfg.beta_rot):
        raise ValueError(f"lambda={cfg.lam} below |beta|={abs(cfg.beta_rot)}: the amplitude bounds need lambda >= |beta|")
    N = cfg.N_approx if N is None else N
    s = cfg.s0 if s is None else s
    f = cfg.forcing if forcing is None else forcing
    lt = cfg.lam ** cfg.theta
    v = solve_linear(-(cfg.lam ** (cfg.alpha - cfg.theta)) * f, cfg, omega)
    q = lt * nonlinearity(v, v)
    terms, residuals = [v], [q]
    v_app = v
    for _ in range(N):
        v_next = solve_linear(q, cfg, omega)
        q = lt * (nonlinearity(v_app, v_next) + nonlinearity(v_next, v_app) + nonlinearity(v_next, v_next))
        v_app = v_app + v_next
        terms.append(v_next)
        residuals.append(q)
    for t in terms + residuals:
        assert_traveling(t)
    F = functional_F(v_app, cfg, omega, forcing=f)
    scale = max(sobolev_norm(q, s), sobolev_norm(lt * nonlinearity(terms[0], terms[0]), s), 1e-300)
    consistency = sobolev_norm(F - q, s) / scale
    norms = [{"n": n, "v": sobolev_norm(t, s), "q": sobolev_norm(r, s)}
             for n, (t, r) in enumerate(zip(terms, residuals))]
    return ApproxSolution(terms, residuals, v_app, q, consistency, norms)


def check_parities(sol: ApproxSolution, rtol: float = 0.0) -> bool:
    return (all(parity(t, rtol) == "odd" for t in sol.terms)
            and all(parity(r, rtol) in ("even",) or not np.any(r.flat) for r in sol.residuals))


# frequency samplers ---------------------------------------------------------

def uniform_admissible_sampler(n: int = 3, seed: int = 0, max_attempts: int = 200000) -> Callable:
    """omega_sampler(cfg) drawing uniform annulus points that pass DC and Omega_gamma."""
    from .diophantine import admissible_sampler

    def sampler(cfg: ProblemConfig) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return admissible_sampler(cfg, rng, n, max_attempts)[0]

    return sampler


def boundary_sampler(n: int = 3, seed: int = 0, margins=(0.02, 0.2),
                     modes=((1, 0), (1, 1)), lambdas: Sequence[float] | None = None) -> Callable:
    """Admissible omegas whose low divisors sit just above the Omega_gamma floor.

    One divisor per listed mode l_k is pinned:

        lam omega.l_k + beta tL(j(l_k)) = s_k (1 + delta_k) lam gamma <l_k>^-tau

    with random signs s_k and margins delta_k drawn from ``margins``; the
    nu x nu system fixes omega.  Such points realize the worst small
    divisors the gate allows, which is where sup-over-Omega_gamma bounds
    are sharp.  Draws come from one seeded stream at every lambda; with
    ``lambdas`` given, a draw is kept only if it is admissible at all of
    them (common random numbers across the sweep).
    """
    modes = np.asarray(modes, np.int64)
    lo, hi = margins

    def pinned(cfg: ProblemConfig, signs: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        lat_j = cfg.momentum.spatial_mode(modes)
        tl = np.array([j[0] / (j @ j) if np.any(j) else 0.0 for j in lat_j])
        brackets = np.maximum(1, np.abs(modes).max(axis=1)).astype(float)
        target = signs * (1 + deltas) * cfg.lam * cfg.gamma * brackets ** (-cfg.tau)
        return np.linalg.solve(modes.astype(float), (target - cfg.beta_rot * tl) / cfg.lam)

    def ok(cfg: ProblemConfig, w: np.ndarray) -> bool:
        return 1 <= np.linalg.norm(w) <= 2 and bool(admissible(w, cfg))

    def sampler(cfg: ProblemConfig) -> np.ndarray:
        if modes.shape != (cfg.nu, cfg.nu) or np.linalg.matrix_rank(modes) < cfg.nu:
            raise ValueError("boundary sampler needs nu independent pin modes")
        rng = np.random.default_rng(seed)
        others = [cfg.with_(lam=float(l)) for l in (lambdas or [])]
        out = []
        for _ in range(20000):
            signs = rng.choice([-1.0, 1.0], size=cfg.nu)
            deltas = rng.uniform(lo, hi, size=cfg.nu)
            if ok(cfg, pinned(cfg, signs, deltas)) and all(ok(c, pinned(c, signs, deltas)) for c in others):
                out.append(pinned(cfg, signs, deltas))
                if len(out) == n:
                    return np.array(out)
        raise ValueError("insufficient admissible samples near the gate boundary")

    return sampler


# scaling -----------------------------------------------------------------------

def loglog_fit(lams: Sequence[float], values: Sequence[Sequence[float]]) -> dict:
    """Regress log(value) on log(lam) pooling all samples per lam."""
    x, y = [], []
    for lam, vals in zip(lams, values):
        for v in vals:
            x.append(np.log(lam))
            y.append(np.log(v))
    res = stats.linregress(x, y)
    return {"slope": float(res.slope), "stderr": float(res.stderr), "intercept": float(res.intercept)}


def predicted_q_exponent(cfg: ProblemConfig, N: int | None = None) -> float:
    N = cfg.N_approx if N is None else N
    return (N + 1) * (cfg.alpha - 2 * (1 - cfg.c_small)) + 1 - cfg.c_small


def scaling_study(cfg_template: ProblemConfig, lambda_list: Sequence[float], omega_sampler: Callable,
                  N_list: Sequence[int] | None = None) -> dict:
    lams = sorted(float(l) for l in lambda_list)
    if len(lams) < 3 or lams[-1] / lams[0] < 100:
        raise ValueError("scaling study needs >= 3 lambda values spanning >= 2 decades")
    N_list = [cfg_template.N_approx] if N_list is None else list(N_list)
    Nmax = max(N_list)
    q = {N: [] for N in N_list}
    amp, v0 = [], []
    samples = {}
    for lam in lams:
        cfg = cfg_template.with_(lam=lam)
        omegas = np.atleast_2d(omega_sampler(cfg))
        if len(omegas) < 3:
            raise ValueError(f"insufficient admissible samples at lambda={lam}")
        samples[lam] = omegas.tolist()
        qrow = {N: [] for N in N_list}
        arow, vrow = [], []
        for w in omegas:
            sol = build_v_app(cfg, w, N=Nmax)
            for N in N_list:
                qrow[N].append(sol.norms[N]["q"])
            lt = lam ** cfg.theta
            arow.append(lt * sobolev_norm(sol.v_app, cfg.s0))
            vrow.append(lt * sol.norms[0]["v"])
        for N in N_list:
            q[N].append(qrow[N])
        amp.append(arow)
        v0.append(vrow)
    out = {"lambdas": lams, "omegas": samples, "q_fits": {}, "q_norms": {str(N): q[N] for N in N_list}}
    for N in N_list:
        fit = loglog_fit(lams, q[N])
        fit["predicted"] = predicted_q_exponent(cfg_template, N)
        out["q_fits"][str(N)] = fit
    out["v_app_fit"] = loglog_fit(lams, amp)
    out["v0_fit"] = loglog_fit(lams, v0)
    out["amplitude_window"] = [cfg_template.alpha - 1, cfg_template.alpha - 1 + cfg_template.c_small]
    return out


__all__ = [
    "solve_linear", "build_v_app", "ApproxSolution", "scaling_study", "loglog_fit",
    "uniform_admissible_sampler", "boundary_sampler", "predicted_q_exponent", "check_parities",
    "BoundWarning",
]
