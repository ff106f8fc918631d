"""Newton iteration with smoothing projectors, and the lambda sweep."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .approx import ApproxSolution, build_v_app, loglog_fit
from .diophantine import (ResonanceError, ResonancePredicate, admissible, gamma_schedule,
                          measure_fraction, omega_gamma_violation, dc_violation, sample_annulus)
from .lattice import TravelingField, parity, project_low, sobolev_norm
from .model import ProblemConfig, functional_F, linearized_L, nonlinearity
from .reduce import MELNIKOV_GAMMA_FACTOR, invert_linearized

log = logging.getLogger(__name__)

OUTCOMES = ("converged", "stalled", "resonance_exit")


@dataclass(frozen=True)
class NMConstants:
    kappa: float
    a1: float
    tau_bar: float
    b1: float
    chi: float
    sigma_bar: float

    @classmethod
    def from_config(cls, cfg: ProblemConfig) -> "NMConstants":
        sb, chi, tau = cfg.sigma_bar, cfg.chi, cfg.tau
        t2 = tau + tau ** 2 + 1
        kappa = 12 * (sb + 1) + 1
        a1 = max(6 * sb + 13, chi ** 2 * t2 + chi * (2 * sb + 1) + 1)
        tau_bar = 2 * sb + 4 + a1 + chi * t2
        b1 = 2 * sb + 4 + (a1 + kappa) / chi
        return cls(kappa, a1, tau_bar, b1, chi, sb)

    def to_dict(self) -> dict:
        return dict(kappa=self.kappa, a1=self.a1, tau_bar=self.tau_bar, b1=self.b1,
                    chi=self.chi, sigma_bar=self.sigma_bar)


def log10_sobolev_norm(f: TravelingField, s: float) -> float:
    """log10 ||f||_s without overflow at large s."""
    lat = f.lattice
    a = np.abs(f.flat)
    nz = a > 0
    if not nz.any():
        return -np.inf
    lw = 2 * s * np.log(lat.bracket[nz].astype(float)) + 2 * np.log(a[nz])
    return float(0.5 * logsumexp(lw) / np.log(10))


@dataclass
class Iterate:
    n: int
    w: TravelingField
    residual: float
    norm_s0: float
    log10_norm_sigma: float
    log10_norm_b1: float
    N: float | None = None
    gamma_n: float | None = None
    step_norm: float | None = None
    defect: float | None = None
    gate: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "w"}


@dataclass
class NashMoserRun:
    cfg: ProblemConfig
    omega: np.ndarray
    inverse_method: str
    projector: str
    constants: NMConstants
    iterates: list[Iterate]
    outcome: str
    reason: str = ""
    tol: float = 0.0
    smallness: dict = field(default_factory=dict)
    approx: ApproxSolution | None = None
    wall_time: float = 0.0
    gates: list[dict] = field(default_factory=list)

    @property
    def w(self) -> TravelingField:
        return self.iterates[-1].w

    @property
    def v_lambda(self) -> TravelingField:
        return self.cfg.lam ** self.cfg.theta * self.w

    @property
    def residual(self) -> float:
        return self.iterates[-1].residual

    @property
    def n_iter(self) -> int:
        return len(self.iterates) - 1

    @property
    def residual_history(self) -> list[float]:
        return [it.residual for it in self.iterates]

    @property
    def schedule(self) -> list[dict]:
        return [{"n": it.n, "N": it.N, "gamma_n": it.gamma_n} for it in self.iterates if it.N is not None]

    def contraction_fit(self, tol: float | None = None) -> dict | None:
        """Fit log r_{n+1} = p log r_n + C over the segment above tol."""
        r = np.array(self.residual_history)
        r = r[r > 0]
        if len(r) < 3:
            return None
        x, y = np.log(r[:-1]), np.log(r[1:])
        p, c = np.polyfit(x, y, 1)
        return {"p": float(p), "C": float(c), "max_excess": float(np.max(y - 1.5 * x))}

    def summary(self) -> dict:
        return {"outcome": self.outcome, "reason": self.reason, "omega": self.omega.tolist(),
                "lambda": self.cfg.lam, "inverse_method": self.inverse_method, "projector": self.projector,
                "iterations": self.n_iter, "residual": self.residual, "tol": self.tol,
                "norm_v_lambda": sobolev_norm(self.v_lambda, self.cfg.s0),
                "iterates": [it.row() for it in self.iterates], "constants": self.constants.to_dict(),
                "smallness": self.smallness, "gates": self.gates, "wall_time": self.wall_time}


def _entry_check(cfg: ProblemConfig, omega: np.ndarray) -> None:
    if not admissible(omega, cfg):
        v = dc_violation(omega, cfg.gamma, cfg.tau, cfg.K_trunc, cfg.momentum)
        kind = "DC"
        if v is None:
            v = omega_gamma_violation(omega, cfg)
            kind = "Omega_gamma"
        raise ResonanceError(f"omega rejected at entry: {kind} fails at l={v}", where=v)


def nash_moser_solve(cfg: ProblemConfig, omega, inverse_method: str = "dense_lu", max_iter: int = 10,
                     tol: float | None = None, projector: str = "schedule",
                     forcing: TravelingField | None = None, w0: TravelingField | None = None,
                     reversible: bool | None = None, delta: float | None = None,
                     gamma_factor: float = MELNIKOV_GAMMA_FACTOR) -> NashMoserRun:
    """w_{n+1} = w_n - Pi_n L_n^{-1} Pi_n F(w_n) starting from v_app,N.

    ``projector`` is "schedule" (Pi_n = low projector at N_n) or "none"
    (plain Newton).  Gates for G_{n+1}: in dense_lu mode the Omega_gamma
    predicate and a condition-number ceiling; in reduction_chain mode the
    Melnikov predicates evaluated on the reduced eigenvalues of L_n.
    """
    t0 = time.perf_counter()
    omega = np.asarray(omega, float)
    if projector not in ("schedule", "none"):
        raise ValueError(f"unknown projector {projector!r}")
    _entry_check(cfg, omega)
    f = cfg.forcing if forcing is None else forcing
    consts = NMConstants.from_config(cfg)
    delta = cfg.exp_delta if delta is None else delta
    small = float(cfg.N0) ** consts.tau_bar / cfg.lam
    smallness = {"value": small, "delta": delta, "ok": bool(small <= delta)}
    if not smallness["ok"]:
        log.info("smallness N0^tau_bar/lambda = %.3g exceeds delta = %.3g (asymptotic condition)", small, delta)
    tol = 1e-9 * cfg.lam ** (1 - cfg.c_small) if tol is None else tol
    if reversible is None:
        reversible = bool(cfg.forcing_even)
    approx = None
    if w0 is None:
        approx = build_v_app(cfg, omega, forcing=f)
        w = approx.v_app
    else:
        w = w0
    s0, sb = cfg.s0, cfg.sigma_bar
    lt = cfg.lam ** cfg.theta
    lat = w.lattice
    m = lat.mask

    def snapshot(n, w, F, **kw):
        return Iterate(n, w, sobolev_norm(F, s0), sobolev_norm(w, s0), log10_sobolev_norm(w, s0 + sb),
                       log10_sobolev_norm(w, s0 + consts.b1), **kw)

    F = functional_F(w, cfg, omega, forcing=f)
    iterates = [snapshot(0, w, F)]
    run = NashMoserRun(cfg, omega, inverse_method, projector, consts, iterates, "stalled",
                       tol=tol, smallness=smallness, approx=approx)
    for n in range(max_iter + 1):
        r = iterates[-1].residual
        if r < tol:
            run.outcome = "converged"
            break
        if n > 0:
            prev = iterates[-2].residual
            # with N_n below the lattice width the projected step ignores the
            # high modes of F and may raise the s0 residual; monotonicity is
            # required once Pi_n is the identity
            full = projector == "none" or iterates[-1].N >= lat.l_bracket.max()
            if full and r >= prev:
                run.outcome, run.reason = "stalled", f"residual did not decrease at step {n}"
                break
        if n == max_iter:
            run.outcome, run.reason = "stalled", f"max_iter={max_iter} reached"
            break
        Nn = cfg.N0 ** (cfg.chi ** n)
        gn = gamma_schedule(gamma_factor * cfg.gamma, n)
        gate = {"step": n, "Omega_gamma": bool(admissible(omega, cfg))}
        if not gate["Omega_gamma"]:
            run.outcome, run.reason = "resonance_exit", "Omega_gamma"
            run.gates.append(gate)
            break
        try:
            handle = invert_linearized(w, cfg, omega, method=inverse_method, reversible=reversible,
                                       gamma_factor=gamma_factor)
        except ResonanceError as exc:
            gate["violation"] = str(exc)
            run.gates.append(gate)
            run.outcome, run.reason = "resonance_exit", str(exc)
            break
        if inverse_method == "dense_lu":
            cond = float(np.linalg.cond(handle.L[np.ix_(m, m)]))
            gate["cond"] = cond
            if cond > cfg.cond_max:
                run.gates.append(gate)
                run.outcome, run.reason = "resonance_exit", f"condition number {cond:.3g} above {cfg.cond_max:.3g}"
                break
        else:
            gate["melnikov"] = [e for e in handle.state.melnikov]
        run.gates.append(gate)
        rhs = project_low(F, Nn) if projector == "schedule" else F
        h = -handle.solve(rhs)
        if projector == "schedule":
            h = project_low(h, Nn)
        w_new = w + h
        F_new = functional_F(w_new, cfg, omega, forcing=f)
        Lh = handle.L @ h.flat
        quad = lt * nonlinearity(h, h).flat
        lhs = F_new.flat - F.flat - Lh
        # F is a difference of O(lambda^(alpha-theta)) terms; round-off is relative to them
        scale = (np.linalg.norm(np.abs(handle.L) @ (np.abs(h.flat) + np.abs(w.flat))) + np.linalg.norm(quad)
                 + cfg.lam ** (cfg.alpha - cfg.theta) * np.linalg.norm(f.flat))
        defect = float(np.linalg.norm(lhs - quad) / max(scale, 1e-300))
        iterates.append(snapshot(n + 1, w_new, F_new, N=Nn, gamma_n=gn, step_norm=sobolev_norm(h, s0),
                                 defect=defect, gate=gate))
        w, F = w_new, F_new
    run.wall_time = time.perf_counter() - t0
    return run


# lambda sweep ---------------------------------------------------------------------------

def gate_attrition(cfg: ProblemConfig, n_samples: int = 10000, seed: int = 0) -> dict:
    """Monte-Carlo share of the annulus rejected by DC and Omega_gamma."""
    dc = ResonancePredicate("DC", gamma=cfg.gamma, tau=cfg.tau, mode_range=cfg.K_trunc,
                            momentum=cfg.momentum)
    og = ResonancePredicate("OmegaGamma", gamma=cfg.gamma, tau=cfg.tau, lam=cfg.lam,
                            beta_rot=cfg.beta_rot, mode_range=cfg.K_trunc, momentum=cfg.momentum)
    est = measure_fraction(dc & og, n_samples, seed, cfg.nu)
    return {"lambda": cfg.lam, "fraction": est.excluded_fraction, "ci_low": est.ci_lo,
            "ci_high": est.ci_hi, "n": est.n_samples}


def theorem_sweep(cfg_template: ProblemConfig, lambda_list: Sequence[float], omegas_per_lambda: int = 3,
                  seed: int = 0, inverse_method: str = "dense_lu", max_attempts: int = 5000,
                  max_iter: int = 10, hierarchy_gate: bool = True, attrition_samples: int = 10000) -> dict:
    """Solve at sampled (lambda, omega) and fit the amplitude exponent.

    Gates per draw, in order: DC and Omega_gamma; an ordered approximate
    hierarchy (||v_{n+1}||_{s0} < ||v_n||_{s0}, the regime where lambda is
    large for that omega); Nash-Moser convergence.  The same seeded
    stream is used at every lambda.
    """
    lams = sorted(float(l) for l in lambda_list)
    if len(lams) < 3:
        raise ValueError("theorem sweep needs >= 3 lambda values")
    rows, per_lambda, attrition = [], {}, []
    odd_ok = True
    for lam in lams:
        cfg = cfg_template.with_(lam=lam)
        rng = np.random.default_rng(seed)
        accepted, rejected = [], {"admissible": 0, "hierarchy": 0, "stalled": 0, "resonance_exit": 0}
        attempts = 0
        while len(accepted) < omegas_per_lambda and attempts < max_attempts:
            omega = sample_annulus(rng, 1, cfg.nu)[0]
            attempts += 1
            if not admissible(omega, cfg):
                rejected["admissible"] += 1
                continue
            sol = build_v_app(cfg, omega)
            if hierarchy_gate and not sol.ordered:
                rejected["hierarchy"] += 1
                continue
            run = nash_moser_solve(cfg, omega, inverse_method=inverse_method, max_iter=max_iter)
            if run.outcome != "converged":
                rejected[run.outcome] += 1
                continue
            norm = sobolev_norm(run.v_lambda, cfg.s0)
            if cfg.forcing_even:
                odd_ok &= parity(run.w, rtol=1e-12) == "odd"
            accepted.append(norm)
            rows.append({"lambda": lam, "omega1": float(omega[0]), "omega2": float(omega[1]), "norm": norm,
                         "residual": run.residual, "iterations": run.n_iter})
        if len(accepted) < omegas_per_lambda:
            raise ValueError(f"insufficient admissible samples at lambda={lam}: "
                             f"{len(accepted)} of {omegas_per_lambda} after {attempts} draws")
        per_lambda[lam] = accepted
        mc = gate_attrition(cfg, attrition_samples, seed)
        mc["sequential"] = 1 - len(accepted) / attempts
        mc["attempts"] = attempts
        mc["rejected"] = rejected
        attrition.append(mc)
        for r in rows:
            if r["lambda"] == lam:
                r["gate_attrition"] = mc["fraction"]
    fit = loglog_fit(lams, [per_lambda[l] for l in lams])
    a, c = cfg_template.alpha, cfg_template.c_small
    window = [a - 1 - 0.1, a - 1 + c + 0.1]
    return {"rows": rows, "slope": fit["slope"], "stderr": fit["stderr"], "intercept": fit["intercept"],
            "window": window, "in_window": bool(window[0] <= fit["slope"] <= window[1]),
            "attrition": attrition,
            "attrition_decreasing": bool(attrition[-1]["fraction"] <= attrition[0]["fraction"]),
            "odd_solutions": bool(odd_ok), "inverse_method": inverse_method, "seed": seed}


__all__ = ["nash_moser_solve", "NashMoserRun", "NMConstants", "Iterate", "theorem_sweep",
           "gate_attrition", "log10_sobolev_norm", "OUTCOMES"]
