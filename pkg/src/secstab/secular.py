"""Order-two-in-the-masses reduction to the secular Hamiltonian.

Two averaging steps remove the fast-angle harmonics up to the filter order
K_F (first from the action-free part, then from the part linear in the fast
actions).  The harmonics of the chosen quasi-resonant combination of mean
longitudes are then treated by one more generating function whose bracket
corrections feed the secular Hamiltonian in (xi, eta) alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .planetary import ExpandedHamiltonian
from .series import (PoissonSeries, average_angles, cartesian_rep,
                     convert_rep, fourier_filter, merge, poisson_bracket,
                     solve_homological)
from .truncation import TruncationPolicy

__all__ = ["AveragingStage", "SecularHamiltonian", "kolmogorov_like_step",
           "select_quasi_resonant", "reduce_to_secular",
           "check_nonresonance"]

SECULAR_REP = cartesian_rep(3, names=("xi", "eta"))


@dataclass
class AveragingStage:
    stage: str
    generator: PoissonSeries
    transformed: ExpandedHamiltonian
    min_divisor: float


@dataclass
class SecularHamiltonian:
    """H(xi, eta): averaged part (order mu) plus bracket corrections
    (order mu^4)."""

    mu1: PoissonSeries
    mu4: PoissonSeries
    chi_qr: PoissonSeries
    policy: TruncationPolicy

    @property
    def rep(self):
        return self.mu1.rep

    def total(self) -> PoissonSeries:
        return self.mu1 + self.mu4

    def quadratic_matrix(self) -> np.ndarray:
        """Symmetric 6x6 matrix S with H_2 = (1/2) u^T S u, u = (xi, eta)."""
        f = self.total()
        quad = f.select(f.secular_degrees() == 2)
        S = np.zeros((6, 6))
        for c, e, _, _ in quad.terms():
            idx = np.flatnonzero(e)
            if idx.size == 1:
                S[idx[0], idx[0]] += 2.0 * c
            else:
                S[idx[0], idx[1]] += c
                S[idx[1], idx[0]] += c
        return S


def check_nonresonance(n_star, K: int, floor: float) -> float:
    """Smallest |k.n*| over 0 < |k| <= K; raises if it dips below floor."""
    n_star = np.asarray(n_star, dtype=float)
    n = n_star.size
    rng = np.arange(-K, K + 1)
    best = np.inf
    grids = np.meshgrid(*([rng] * n), indexing="ij")
    kk = np.stack([g.ravel() for g in grids], axis=1)
    deg = np.abs(kk).sum(axis=1)
    kk = kk[(deg > 0) & (deg <= K)]
    vals = np.abs(kk @ n_star)
    best = float(vals.min())
    if best <= floor:
        k = kk[int(np.argmin(vals))]
        from .series import SmallDivisorError
        raise SmallDivisorError(k, best, floor)
    return best


def _mu2_transform(H: ExpandedHamiltonian, chi: PoissonSeries,
                   target_mask: np.ndarray,
                   policy: TruncationPolicy) -> ExpandedHamiltonian:
    """exp(L_chi) (n*.L + K + P) truncated at second order in the masses.

    The generator solves the homological equation against the masked part
    of P, so L_chi(n*.L) equals minus that part exactly and the filtered
    terms are removed by selection rather than by floating cancellation:

        P' = (P - target) + {chi, K + P} + 1/2 {chi, {chi, K}}
                          - 1/2 {chi, target} + O(mu^3).

    Corrections of degree two in the fast actions fall outside the kept
    grades and are dropped, as is everything beyond second order in the
    mass ratio (far below the truncation error of the expansion itself).
    """
    wide = policy.with_(max_action_degree=2)
    pert = H.pert
    target = pert.select(target_mask)
    rest = pert.select(~target_mask)
    b_kp = poisson_bracket(chi, merge([H.kepler2, pert], wide), "full", wide)
    b_k = poisson_bracket(chi, H.kepler2, "full", wide)
    b_kk = poisson_bracket(chi, b_k, "full", wide) * 0.5
    b_t = poisson_bracket(chi, target, "full", wide) * (-0.5)
    out = merge([rest, b_kp, b_kk, b_t], wide)
    keep = out.action_degrees() <= H.policy.max_action_degree
    return ExpandedHamiltonian(H.config, H.lambda_star, H.n_star, H.kepler2,
                               out.select(keep), H.policy)


def kolmogorov_like_step(H: ExpandedHamiltonian, stage: int,
                         K_F: int = None, degree_cap: int = None
                         ) -> AveragingStage:
    """One fast-angle averaging step.

    Stage 1 solves the homological equation against the filtered part of
    the action-free grades; stage 2 against the grades linear in L.  The
    generator of stage 2 is automatically linear in the fast actions.
    """
    cfg = H.config
    K_F = cfg.K_F if K_F is None else K_F
    degree_cap = cfg.chi_o2_degree if degree_cap is None else degree_cap
    floor = cfg.divisor_floor_rel * np.linalg.norm(H.n_star)
    min_div = check_nonresonance(H.n_star, K_F, floor)

    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    pol = cfg.stage_policy(H.lambda_star)
    ldeg = 0 if stage == 1 else 1
    pert = H.pert
    tdeg = pert.trig_degrees()
    mask = (pert.action_degrees() == ldeg) \
        & (pert.secular_degrees() <= degree_cap) \
        & (tdeg > 0) & (tdeg <= K_F)
    if not mask.any():
        return AveragingStage(f"chi{stage}_O2", PoissonSeries.zero(pert.rep),
                              H, min_div)
    chi = solve_homological(H.n_star, pert.select(mask), floor,
                            angle_slots=range(cfg.n_planets))
    transformed = _mu2_transform(H, chi, mask, pol)
    return AveragingStage(f"chi{stage}_O2", chi, transformed, min_div)


def select_quasi_resonant(f: PoissonSeries, k_bar) -> PoissonSeries:
    """Keep exactly the terms whose harmonic is +/- k_bar."""
    k_bar = np.asarray(k_bar, dtype=np.int16)
    if not k_bar.any():
        raise ValueError("quasi-resonant harmonic must be nonzero")
    nz = np.flatnonzero(k_bar)
    if k_bar[nz[0]] < 0:
        k_bar = -k_bar
    mask = np.all(f.harm == k_bar[None, :], axis=1)
    return f.select(mask)


def reduce_to_secular(H: ExpandedHamiltonian, k_bar=None,
                      qr_degree_cap: int = None, final_cap: int = None
                      ) -> SecularHamiltonian:
    """Average to the secular Hamiltonian with quasi-resonant corrections.

    Expects both averaging stages already applied.  The output lives in the
    (xi, eta) cartesian representation and contains the angular average of
    the action-free grades plus the three scoped-bracket corrections built
    from the quasi-resonant generator.
    """
    cfg = H.config
    k_bar = cfg.quasi_resonant_harmonic if k_bar is None else k_bar
    qr_degree_cap = cfg.chi_qr_degree if qr_degree_cap is None \
        else qr_degree_cap
    final_cap = cfg.secular_degree if final_cap is None else final_cap
    floor = cfg.divisor_floor_rel * np.linalg.norm(H.n_star)
    pol = H.policy.with_(max_secular_degree=max(final_cap,
                                                H.policy.max_secular_degree))

    pert = H.pert
    avg = average_angles(pert.select(pert.action_degrees() == 0))

    qr = select_quasi_resonant(pert, k_bar)
    r0 = qr.select((qr.action_degrees() == 0)
                   & (qr.secular_degrees() <= qr_degree_cap))
    r1 = qr.select(qr.action_degrees() == 1)

    if r0.is_zero:
        chi = PoissonSeries.zero(pert.rep)
        corr = PoissonSeries.zero(pert.rep)
    else:
        chi = solve_homological(H.n_star, r0, floor,
                                angle_slots=range(cfg.n_planets))
        lie_kep = poisson_bracket(chi, H.kepler2, "full", pol)
        c_kep = poisson_bracket(chi, lie_kep, "fast", pol) * 0.5
        c_r1 = poisson_bracket(chi, r1, "fast", pol) \
            if not r1.is_zero else PoissonSeries.zero(pert.rep)
        c_r0 = poisson_bracket(chi, r0, "secular", pol) * 0.5
        corr = average_angles(merge([c_kep, c_r1, c_r0], pol))
        corr = corr.select(corr.action_degrees() == 0)

    sec_pol = TruncationPolicy(max_secular_degree=final_cap,
                               drop_threshold=H.policy.drop_threshold)

    def to_secular(f):
        out = convert_rep(f, SECULAR_REP,
                          poly_map=[None, None, None, 0, 1, 2, 3, 4, 5])
        return out.truncated(sec_pol)

    return SecularHamiltonian(to_secular(avg), to_secular(corr), chi, sec_pol)
