"""Planetary Hamiltonian of the planar Sun--Jupiter--Saturn--Uranus model.

Builds the translated, expanded Hamiltonian

    n*.L + sum_j1 h^Kep_{j1,0}(L) + mu * sum h_{j1,j2}(L, lambda, xi, eta)

from masses and heliocentric orbital elements.  The two-body position and
velocity of each planet are developed as truncated polynomials in
(L, xi, eta) with coefficients tabulated on a uniform grid of mean
longitudes; pair interactions are composed on the product grid and the
Fourier coefficients in the fast angles are read off by FFT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .series import PoissonSeries, merge, poincare_rep
from .truncation import TruncationPolicy

__all__ = [
    "PlanetaryConfig", "CanonicalState", "ExpandedHamiltonian",
    "laplace_coefficient", "poincare_from_elements", "elements_from_poincare",
    "reference_actions", "expand_hamiltonian", "direct_hamiltonian",
    "TABLE_NU", "TABLE_XY0", "TABLE_OMEGA",
]

TWO_PI = 2.0 * math.pi

#: Reference secular frequencies of the diagonalized quadratic part (rad/yr).
TABLE_NU = np.array([-1.1212724892e-4, -1.9688444678e-5, -1.1134564418e-5])

#: Reference initial conditions in the diagonalized secular variables.
TABLE_XY0 = (np.array([1.5407573458e-2, -3.0574059274e-2, 1.1186486403e-2]),
             np.array([-2.5320810665e-2, -5.2728862107e-3, 6.0669645406e-3]))

#: Reference torus frequencies from frequency analysis (rad/yr).
TABLE_OMEGA = np.array([-1.51665408389554804e-4, -2.05981220762083458e-5,
                        -1.16008414414439544e-5])


@dataclass
class PlanetaryConfig:
    """Masses, elements and truncation limits (units: AU, yr, G = 1)."""

    G: float = 1.0
    m0: float = TWO_PI ** 2
    masses: tuple = (TWO_PI ** 2 / 1047.355, TWO_PI ** 2 / 3498.5,
                     TWO_PI ** 2 / 22902.98)
    a: tuple = (5.20463727204700266, 9.54108529142232165, 19.2231635458410572)
    mean_anomaly: tuple = (3.04525729444853654, 5.32199311882584869,
                           0.19431922829271914)
    e: tuple = (0.04785365972484999, 0.05460848595674678, 0.04858667407651962)
    perihelion: tuple = (0.24927354029554571, 1.61225062288036902,
                         2.99374344439246487)
    truncation: TruncationPolicy = field(default_factory=lambda:
                                         TruncationPolicy(1, 8, 6))
    K_F: int = 8
    fft_grid: int = 64
    fft_noise_floor: float = 1e-15
    series_drop: float = 0.0
    value_drop: float = 1e-13
    secular_domain: float = 0.1
    fast_domain_mu: float = 1.0
    # secular-stage generator caps (degree in (xi, eta))
    chi_o2_degree: int = 3
    chi_qr_degree: int = 5
    secular_degree: int = 8
    quasi_resonant_harmonic: tuple = (3, -5, -7)
    divisor_floor_rel: float = 1e-10
    # observational uncertainties of the secular variables (Jupiter, Saturn)
    delta_xi: tuple = (1.0e-5, 1.0e-5)
    delta_eta: tuple = (1.0e-5, 1.0e-5)
    # normal-form stage limits
    kolmogorov_action_degree: int = 5
    kolmogorov_trig_degree: int = 16
    birkhoff_stages: int = 2
    nf_value_drop: float = 1e-26
    R_prime: int = 8
    R_std: int = 8
    tune_iterations: int = 2
    # reference initial conditions of the diagonalized secular flow
    xy0: tuple = (tuple(TABLE_XY0[0]), tuple(TABLE_XY0[1]))
    target_omega: tuple = None
    threads: int = 1

    def __post_init__(self):
        if any(m <= 0 for m in self.masses) or self.m0 <= 0:
            raise ValueError("masses must be positive")
        if any(not 0 <= ec < 1 for ec in self.e):
            raise ValueError("eccentricities must lie in [0, 1)")
        if self.fft_grid < 4 * self.truncation.max_trig_degree:
            raise ValueError("fft_grid must be at least 4x the trig degree")

    @property
    def n_planets(self) -> int:
        return len(self.masses)

    def beta(self, j: int) -> float:
        return self.m0 * self.masses[j] / (self.m0 + self.masses[j])

    def gm(self, j: int) -> float:
        return self.G * (self.m0 + self.masses[j])

    @property
    def mu(self) -> float:
        return max(self.masses) / self.m0

    def domain_scales(self, lambda_star) -> tuple:
        """Polydisc radii for the domain-aware drop, per Poincare slot."""
        lam = np.asarray(lambda_star, dtype=float)
        fast = tuple(self.fast_domain_mu * self.mu * lam)
        sec = tuple(self.secular_domain * np.sqrt(2.0 * lam))
        return fast + sec + sec

    def stage_policy(self, lambda_star) -> TruncationPolicy:
        """Truncation used by the expansion and the averaging stages."""
        return self.truncation.with_(
            drop_threshold=max(self.truncation.drop_threshold,
                               self.series_drop),
            value_drop=self.value_drop,
            value_scales=self.domain_scales(lambda_star))

    def with_paper_truncation(self) -> "PlanetaryConfig":
        """Published truncation orders; memory grows by orders of magnitude."""
        return replace(self, truncation=TruncationPolicy(1, 16, 18),
                       fft_grid=128, chi_o2_degree=6, chi_qr_degree=9,
                       secular_degree=18, kolmogorov_trig_degree=50)


@dataclass
class CanonicalState:
    """Poincare variables of the three planets."""

    Lambda: np.ndarray
    lam: np.ndarray
    xi: np.ndarray
    eta: np.ndarray


@dataclass
class ExpandedHamiltonian:
    """n*.L + Keplerian quadratic + graded perturbation."""

    config: PlanetaryConfig
    lambda_star: np.ndarray
    n_star: np.ndarray
    kepler2: PoissonSeries
    pert: PoissonSeries
    policy: TruncationPolicy

    @property
    def rep(self):
        return self.pert.rep

    def linear_series(self) -> PoissonSeries:
        return PoissonSeries.linear(self.rep, self.n_star,
                                    slots=self.rep.action_slots)

    def total(self, include_linear: bool = True) -> PoissonSeries:
        out = self.kepler2 + self.pert
        if include_linear:
            out = out + self.linear_series()
        return out

    def pert_grade(self, j1=None, j2=None) -> PoissonSeries:
        """Perturbation terms of L-degree j1 and secular degree j2."""
        mask = np.ones(self.pert.nterms, dtype=bool)
        if j1 is not None:
            mask &= self.pert.action_degrees() == j1
        if j2 is not None:
            mask &= self.pert.secular_degrees() == j2
        return self.pert.select(mask)


# ---------------------------------------------------------------------------
# classic quadrature oracle

def laplace_coefficient(alpha: float, s: float = 0.5, j: int = 0,
                        n_nodes: int = 1 << 14) -> float:
    """b_s^(j)(alpha) = (1/pi) int_0^{2pi} cos(j t) (1 - 2a cos t + a^2)^-s dt.

    Plain trapezoid quadrature on the periodic integrand; spectrally
    accurate, used as an independent oracle for the averaged interaction.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    t = np.linspace(0.0, TWO_PI, n_nodes, endpoint=False)
    core = (1.0 - 2.0 * alpha * np.cos(t) + alpha * alpha) ** (-s)
    return float((np.cos(j * t) * core).mean() * 2.0)


# ---------------------------------------------------------------------------
# Poincare variables

def poincare_from_elements(config: PlanetaryConfig) -> CanonicalState:
    """Map heliocentric elements to planar Poincare variables."""
    n = config.n_planets
    Lam = np.zeros(n)
    lam = np.zeros(n)
    xi = np.zeros(n)
    eta = np.zeros(n)
    for j in range(n):
        e = config.e[j]
        Lam[j] = config.beta(j) * math.sqrt(config.gm(j) * config.a[j])
        lam[j] = config.mean_anomaly[j] + config.perihelion[j]
        ecc = math.sqrt(1.0 - math.sqrt(1.0 - e * e))
        xi[j] = math.sqrt(2.0 * Lam[j]) * ecc * math.cos(config.perihelion[j])
        eta[j] = -math.sqrt(2.0 * Lam[j]) * ecc * math.sin(config.perihelion[j])
    return CanonicalState(Lam, lam, xi, eta)


def elements_from_poincare(config: PlanetaryConfig, state: CanonicalState):
    """Invert :func:`poincare_from_elements` (used by the direct oracle)."""
    n = config.n_planets
    a = np.zeros(n)
    e = np.zeros(n)
    peri = np.zeros(n)
    mean = np.zeros(n)
    for j in range(n):
        beta = config.beta(j)
        a[j] = (state.Lambda[j] / beta) ** 2 / config.gm(j)
        c2 = (state.xi[j] ** 2 + state.eta[j] ** 2) / (2.0 * state.Lambda[j])
        e[j] = math.sqrt(max(c2 * (2.0 - c2), 0.0))
        peri[j] = math.atan2(-state.eta[j], state.xi[j]) if e[j] > 0 else 0.0
        mean[j] = state.lam[j] - peri[j]
    return a, e, peri, mean


def reference_actions(config: PlanetaryConfig, a_star=None, samples=None):
    """Fast-action center Lambda* and mean motions n*.

    ``a_star`` gives the averaged semi-major axes directly; alternatively
    ``samples`` is an (n_times, n_planets) array of osculating semi-major
    axes whose mean is used.  Defaults to the configured initial axes.
    """
    if a_star is None:
        if samples is not None:
            a_star = np.asarray(samples, dtype=float).mean(axis=0)
        else:
            a_star = np.asarray(config.a, dtype=float)
    a_star = np.asarray(a_star, dtype=float)
    if np.any(a_star <= 0):
        raise ValueError("semi-major axes must be positive")
    lam_star = np.array([config.beta(j) * math.sqrt(config.gm(j) * a_star[j])
                         for j in range(config.n_planets)])
    n_star = np.array([math.sqrt(config.gm(j) / a_star[j] ** 3)
                       for j in range(config.n_planets)])
    return lam_star, n_star


# ---------------------------------------------------------------------------
# grid jets: truncated polynomials with per-grid-node complex coefficients


class _Jet:
    """Polynomial in a few real variables, coefficients tabulated on a grid.

    ``expo`` is (n_terms, n_vars) with plain integer exponents, ``vals`` is
    (n_terms, ...) broadcastable against the grid shape.  ``caps`` is a
    tuple of (slot_tuple, max_total_degree) pairs enforced by every product.
    """

    __slots__ = ("expo", "vals", "caps", "nvars")

    def __init__(self, nvars, expo, vals, caps):
        self.nvars = nvars
        self.expo = np.asarray(expo, dtype=np.int16).reshape(-1, nvars)
        self.vals = vals
        self.caps = caps

    @classmethod
    def const(cls, nvars, value, caps):
        return cls(nvars, np.zeros((1, nvars), np.int16),
                   np.asarray(value, dtype=complex)[None, ...], caps)

    @classmethod
    def variable(cls, nvars, slot, caps, scale=1.0):
        e = np.zeros((1, nvars), np.int16)
        e[0, slot] = 1
        return cls(nvars, e, np.array([scale], dtype=complex), caps)

    def _dedupe(self, grid_shape=None):
        order = np.lexsort(tuple(self.expo[:, j]
                                 for j in range(self.nvars - 1, -1, -1)))
        expo = self.expo[order]
        vals = self.vals[order]
        start = np.flatnonzero(np.concatenate(
            ([True], np.any(expo[1:] != expo[:-1], axis=1))))
        if start.size == expo.shape[0]:
            return _Jet(self.nvars, expo, vals, self.caps)
        out = np.add.reduceat(vals, start, axis=0)
        return _Jet(self.nvars, expo[start], out, self.caps)

    def _capmask(self, expo):
        mask = np.ones(expo.shape[0], dtype=bool)
        for slots, cap in self.caps:
            mask &= expo[:, list(slots)].astype(np.int64).sum(axis=1) <= cap
        return mask

    def __add__(self, other):
        if isinstance(other, (int, float, complex)):
            other = _Jet.const(self.nvars, np.asarray(other, complex),
                               self.caps)
        rank = max(self.vals.ndim, other.vals.ndim) - 1
        va = _align(self.vals, rank)
        vb = _align(other.vals, rank)
        grid = np.broadcast_shapes(va.shape[1:], vb.shape[1:])
        return _Jet(self.nvars, np.concatenate([self.expo, other.expo]),
                    np.concatenate([_bcast(va, grid), _bcast(vb, grid)]),
                    self.caps)._dedupe()

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return _Jet(self.nvars, self.expo, -self.vals, self.caps)

    def __sub__(self, other):
        return self + (-other if isinstance(other, _Jet)
                       else -np.asarray(other, complex))

    def scale(self, factor):
        """Multiply by a scalar or by a grid-shaped array."""
        return _Jet(self.nvars, self.expo, self.vals * factor, self.caps)

    def conj(self):
        """Complex conjugate (the polynomial variables are real)."""
        return _Jet(self.nvars, self.expo, np.conj(self.vals), self.caps)

    def mul(self, other: "_Jet") -> "_Jet":
        na = self.expo.shape[0]
        rank = max(self.vals.ndim, other.vals.ndim) - 1
        va = _align(self.vals, rank)
        vb = _align(other.vals, rank)
        rows_e = []
        rows_v = []
        for i in range(na):
            expo = self.expo[i][None, :] + other.expo
            keep = self._capmask(expo)
            if not keep.any():
                continue
            rows_e.append(expo[keep])
            rows_v.append(va[i][None, ...] * vb[keep])
        if not rows_e:
            return _Jet(self.nvars, np.zeros((0, self.nvars), np.int16),
                        np.zeros((0,) + (1,) * rank, complex), self.caps)
        grid = np.broadcast_shapes(*(v.shape[1:] for v in rows_v))
        vals = np.concatenate([_bcast(v, grid) for v in rows_v])
        return _Jet(self.nvars, np.concatenate(rows_e), vals,
                    self.caps)._dedupe()

    def power_series(self, coeffs) -> "_Jet":
        """sum_m coeffs[m] * self^m for a jet with no constant term (Horner)."""
        if np.any(np.all(self.expo == 0, axis=1)):
            i = int(np.argmax(np.all(self.expo == 0, axis=1)))
            if np.max(np.abs(self.vals[i])) > 1e-13:
                raise ValueError("power_series needs a zero constant term")
        acc = _Jet.const(self.nvars, complex(coeffs[-1]), self.caps)
        for c in reversed(coeffs[:-1]):
            acc = acc.mul(self) + complex(c)
        return acc

    def split_by_slots(self, slots):
        """Split into the part free of ``slots`` and the remainder."""
        deg = self.expo[:, list(slots)].astype(np.int64).sum(axis=1)
        free = deg == 0
        return (_Jet(self.nvars, self.expo[free], self.vals[free], self.caps),
                _Jet(self.nvars, self.expo[~free], self.vals[~free],
                     self.caps))

    def constant_row(self):
        hit = np.all(self.expo == 0, axis=1)
        if not hit.any():
            return np.zeros((), complex)
        return self.vals[int(np.argmax(hit))]

    def without_constant(self) -> "_Jet":
        hit = np.all(self.expo == 0, axis=1)
        return _Jet(self.nvars, self.expo[~hit], self.vals[~hit], self.caps)

    def lift(self, nvars, slot_map, axis_expand, caps) -> "_Jet":
        """Embed into a larger variable space / higher-rank grid."""
        expo = np.zeros((self.expo.shape[0], nvars), np.int16)
        for src, dst in enumerate(slot_map):
            expo[:, dst] = self.expo[:, src]
        vals = np.expand_dims(self.vals, axis=axis_expand)
        return _Jet(nvars, expo, vals, caps)


def _bcast(vals, grid_shape):
    target = (vals.shape[0],) + tuple(grid_shape)
    return np.broadcast_to(vals, target) if vals.shape != target \
        else vals


def _align(vals, rank):
    """Append singleton grid axes until ``vals`` has 1 + rank dimensions."""
    while vals.ndim - 1 < rank:
        vals = vals[..., None]
    return vals


def _binom_series(alpha: float, order: int):
    """Coefficients of (1 + u)^alpha up to u^order."""
    out = [1.0]
    for m in range(1, order + 1):
        out.append(out[-1] * (alpha - (m - 1)) / m)
    return out


def _cos_series(order: int):
    return [((-1) ** (m // 2) / math.factorial(m)) if m % 2 == 0 else 0.0
            for m in range(order + 1)]


def _sin_series(order: int):
    return [((-1) ** ((m - 1) // 2) / math.factorial(m)) if m % 2 == 1
            else 0.0 for m in range(order + 1)]


def _planet_jet(config: PlanetaryConfig, j: int, lam_star_j: float,
                grid: np.ndarray, caps, s_cap: int, l_cap: int):
    """Position and momentum of planet j as jets in (L_j, xi_j, eta_j)."""
    beta = config.beta(j)
    gm = config.gm(j)
    a_star = (lam_star_j / beta) ** 2 / gm
    n_star = math.sqrt(gm / a_star ** 3)
    order = s_cap + l_cap

    delta = _Jet.variable(3, 0, caps, scale=1.0 / lam_star_j)  # L / Lambda*
    one_p = lambda alpha: delta.power_series(  # noqa: E731
        _binom_series(alpha, l_cap))
    sqrt_2lam = math.sqrt(2.0 * lam_star_j)
    inv_sqrt = one_p(-0.5).scale(1.0 / sqrt_2lam)
    xi = _Jet.variable(3, 1, caps)
    eta = _Jet.variable(3, 2, caps)
    w = (xi + eta.scale(1j)).mul(inv_sqrt)
    wbar = (xi + eta.scale(-1j)).mul(inv_sqrt)
    u = w.mul(wbar)                      # = 1 - sqrt(1 - e^2)
    sq = u.scale(-0.5).power_series(_binom_series(0.5, order)) \
        .scale(math.sqrt(2.0))           # sqrt(2 - u)
    e_minus = w.mul(sq)                  # e * exp(-i peri) = k + i h
    e_plus = wbar.mul(sq)                # e * exp(+i peri) = k - i h
    kj = (e_minus + e_plus).scale(0.5)
    hj = (e_minus - e_plus).scale(-0.5j)

    cosl = np.cos(grid)
    sinl = np.sin(grid)
    dF = _Jet.const(3, np.zeros_like(grid, dtype=complex), caps)
    for _ in range(order):
        cosd = dF.power_series(_cos_series(order))
        sind = dF.power_series(_sin_series(order))
        sinF = cosd.scale(sinl) + sind.scale(cosl)
        cosF = cosd.scale(cosl) - sind.scale(sinl)
        dF = kj.mul(sinF) + hj.mul(cosF)
    cosd = dF.power_series(_cos_series(order))
    sind = dF.power_series(_sin_series(order))
    sinF = cosd.scale(sinl) + sind.scale(cosl)
    cosF = cosd.scale(cosl) - sind.scale(sinl)
    expiF = cosF + sinF.scale(1j)
    expmiF = cosF + sinF.scale(-1j)

    a_jet = one_p(2.0).scale(a_star)
    bracket_pos = expiF.mul(u.scale(-0.5) + 1.0) \
        + expmiF.mul(wbar.mul(wbar)).scale(0.5) - e_plus
    z = a_jet.mul(bracket_pos)

    ecosE = kj.mul(cosF) - hj.mul(sinF)
    inv_r = ecosE.power_series([1.0] * (order + 1))   # 1/(1 - e cos E)
    n_jet = one_p(-3.0).scale(n_star)
    bracket_vel = expiF.mul(u.scale(-0.5) + 1.0) \
        - expmiF.mul(wbar.mul(wbar)).scale(0.5)
    zdot = a_jet.mul(n_jet).mul(inv_r).mul(bracket_vel).scale(1j)
    ptilde = zdot.scale(beta)
    return z, ptilde


def _emit_terms(rep, jet: "_Jet", pair, trig_cap, n_grid, n_planets,
                noise_floor=1e-15):
    """FFT a pair jet and emit canonical Poisson-series arrays."""
    i, j = pair
    n = n_planets
    expo_rows = []
    harm_rows = []
    sin_rows = []
    coef_rows = []
    vals = np.ascontiguousarray(
        np.broadcast_to(jet.vals,
                        (jet.vals.shape[0], n_grid, n_grid)))
    resid = np.max(np.abs(vals.imag)) if vals.size else 0.0
    scale = np.max(np.abs(vals.real)) if vals.size else 1.0
    if resid > 1e-9 * max(scale, 1.0):
        raise FloatingPointError(
            f"pair jet has non-real coefficients (residual {resid:.2e})")
    spec = np.fft.fft2(vals.real, axes=(1, 2)) / (n_grid * n_grid)
    freqs = np.fft.fftfreq(n_grid, d=1.0 / n_grid).astype(int)
    index_of = {int(k): idx for idx, k in enumerate(freqs)}
    sel = [(int(ki), int(kj)) for ki in freqs for kj in freqs
           if abs(ki) + abs(kj) <= trig_cap
           and (ki > 0 or (ki == 0 and kj >= 0))]
    nterm = jet.expo.shape[0]
    for ki, kj in sel:
        c = spec[:, index_of[ki], index_of[kj]]
        kvec = np.zeros(n, dtype=np.int16)
        kvec[i] = ki
        kvec[j] = kj
        ccos = 2.0 * c.real if (ki, kj) != (0, 0) else c.real
        csin = -2.0 * c.imag if (ki, kj) != (0, 0) else np.zeros(nterm)
        expo9 = np.zeros((nterm, 3 * n), dtype=np.int16)
        expo9[:, 0 + i] = 2 * jet.expo[:, 0]
        expo9[:, 0 + j] = 2 * jet.expo[:, 1]
        expo9[:, n + i] = 2 * jet.expo[:, 2]
        expo9[:, 2 * n + i] = 2 * jet.expo[:, 3]
        expo9[:, n + j] = 2 * jet.expo[:, 4]
        expo9[:, 2 * n + j] = 2 * jet.expo[:, 5]
        for arr, sin in ((ccos, False), (csin, True)):
            keep = np.abs(arr) > 0.0
            if not keep.any():
                continue
            expo_rows.append(expo9[keep])
            harm_rows.append(np.repeat(kvec[None, :], keep.sum(), axis=0))
            sin_rows.append(np.full(keep.sum(), sin))
            coef_rows.append(arr[keep])
    if not expo_rows:
        return PoissonSeries.zero(rep)
    coef = np.concatenate(coef_rows)
    # FFT rounding leaves broadband dust far below the smallest coefficient
    # the d'Alembert structure allows; drop it relative to the pair scale
    keep = np.abs(coef) > noise_floor * np.abs(coef).max()
    return PoissonSeries(rep, np.concatenate(expo_rows)[keep],
                         np.concatenate(harm_rows)[keep],
                         np.concatenate(sin_rows)[keep],
                         coef[keep])


def expand_hamiltonian(config: PlanetaryConfig, lambda_star=None,
                       fft_grid=None) -> ExpandedHamiltonian:
    """Expand the translated Hamiltonian around Lambda*.

    The Keplerian part is carried to degree two in L in closed form; the
    pair interactions T1 + U1 are truncated at the policy's L, secular and
    trig degrees.
    """
    policy = config.truncation
    if lambda_star is None:
        lambda_star, n_star = reference_actions(config)
    else:
        lambda_star = np.asarray(lambda_star, dtype=float)
        n_star = np.array([
            config.gm(j) ** 2 * config.beta(j) ** 3 / lambda_star[j] ** 3
            for j in range(config.n_planets)])
    n_grid = int(fft_grid or config.fft_grid)
    d_t = policy.max_trig_degree
    if n_grid < 2 * d_t + 2:
        raise ValueError("FFT grid too small for the requested trig degree")
    s_cap = policy.max_secular_degree
    l_cap = policy.max_action_degree
    rep = poincare_rep(config.n_planets)

    grid = TWO_PI * np.arange(n_grid) / n_grid
    caps1 = (((0,), l_cap), ((1, 2), s_cap))
    jets = [_planet_jet(config, j, lambda_star[j], grid, caps1, s_cap, l_cap)
            for j in range(config.n_planets)]

    caps2 = (((0, 1), l_cap), ((2, 3, 4, 5), s_cap))
    pieces = []
    for i in range(config.n_planets):
        for j in range(i + 1, config.n_planets):
            # pair variable order: (L_i, L_j, xi_i, eta_i, xi_j, eta_j)
            zi = jets[i][0].lift(6, (0, 2, 3), -1, caps2)
            pi_ = jets[i][1].lift(6, (0, 2, 3), -1, caps2)
            zj = jets[j][0].lift(6, (1, 4, 5), -2, caps2)
            pj_ = jets[j][1].lift(6, (1, 4, 5), -2, caps2)

            d = zi - zj
            d2 = d.mul(d.conj())
            d0 = d2.constant_row().real
            if np.min(d0) <= 0:
                raise FloatingPointError("colliding circular orbits on grid")
            v = (d2.scale(1.0 / d0) - 1.0).without_constant()
            # the action part is linear, so (1+v0+v1)^a = P(v0) + v1 P'(v0)
            v0, v1 = v.split_by_slots((0, 1))
            pc = _binom_series(-0.5, s_cap)
            dpc = [m * pc[m] for m in range(1, s_cap + 1)]
            inv_delta = v0.power_series(pc)
            if dpc and v1.expo.shape[0] and l_cap >= 1:
                inv_delta = inv_delta + v1.mul(v0.power_series(dpc))
            inv_delta = inv_delta.scale(d0 ** -0.5)
            u_pair = inv_delta.scale(-config.G * config.masses[i]
                                     * config.masses[j])

            t_cross = pi_.mul(pj_.conj())
            t_pair = (t_cross + t_cross.conj()).scale(0.5 / config.m0)

            pieces.append(_emit_terms(rep, u_pair + t_pair, (i, j), d_t,
                                      n_grid, config.n_planets,
                                      config.fft_noise_floor))

    stage_pol = config.stage_policy(lambda_star)
    pert = merge(pieces, stage_pol)

    kep_terms = []
    for j in range(config.n_planets):
        coeff = -1.5 * n_star[j] / lambda_star[j]
        e = [0.0] * rep.n_poly
        e[j] = 2.0
        kep_terms.append((coeff, e, (0,) * rep.n_ang, False))
    kepler2 = PoissonSeries.from_terms(rep, kep_terms)
    return ExpandedHamiltonian(config, lambda_star, n_star, kepler2, pert,
                               stage_pol)


# ---------------------------------------------------------------------------
# direct (unexpanded) Hamiltonian, the oracle for the expansion


def solve_kepler(mean_anom: float, e: float, tol: float = 1e-14) -> float:
    """Eccentric anomaly from Kepler's equation by Newton iteration."""
    E = mean_anom if e < 0.8 else math.pi
    for _ in range(64):
        dE = (E - e * math.sin(E) - mean_anom) / (1.0 - e * math.cos(E))
        E -= dE
        if abs(dE) < tol:
            break
    return E


def _cartesian_two_body(config, j, a, e, peri, mean):
    gm = config.gm(j)
    E = solve_kepler(mean % TWO_PI, e)
    n = math.sqrt(gm / a ** 3)
    cosE, sinE = math.cos(E), math.sin(E)
    fac = math.sqrt(1.0 - e * e)
    rot = complex(math.cos(peri), math.sin(peri))
    z = a * rot * complex(cosE - e, fac * sinE)
    zdot = (n * a / (1.0 - e * cosE)) * rot * complex(-sinE, fac * cosE)
    return z, config.beta(j) * zdot


def direct_hamiltonian(config: PlanetaryConfig, state: CanonicalState) -> float:
    """Evaluate the full four-body Hamiltonian at a Poincare-variable point.

    Independent of the expansion machinery: inverts the variables to
    elements, solves Kepler's equation numerically and sums the kinetic and
    potential pieces.
    """
    a, e, peri, mean = elements_from_poincare(config, state)
    zs, ps = [], []
    for j in range(config.n_planets):
        z, p = _cartesian_two_body(config, j, a[j], e[j], peri[j], mean[j])
        zs.append(z)
        ps.append(p)
    t0 = sum(abs(ps[j]) ** 2 / (2.0 * config.beta(j))
             for j in range(config.n_planets))
    u0 = -sum(config.G * config.m0 * config.masses[j] / abs(zs[j])
              for j in range(config.n_planets))
    t1 = sum((ps[i] * ps[j].conjugate()).real
             for i in range(config.n_planets)
             for j in range(i + 1, config.n_planets)) / config.m0
    u1 = -sum(config.G * config.masses[i] * config.masses[j]
              / abs(zs[i] - zs[j])
              for i in range(config.n_planets)
              for j in range(i + 1, config.n_planets))
    return t0 + u0 + t1 + u1


def keplerian_reference(config: PlanetaryConfig, lambda_star) -> float:
    """F0(Lambda*), the constant dropped by the translation."""
    tot = 0.0
    for j in range(config.n_planets):
        beta = config.beta(j)
        tot -= config.gm(j) ** 2 * beta ** 3 / (2.0 * lambda_star[j] ** 2)
    return tot


def newtonian_rhs(config: PlanetaryConfig):
    """Heliocentric Newtonian accelerations for the direct 4-body flow.

    State layout: positions (x_j, y_j) then velocities, flattened.
    """
    G = config.G
    m0 = config.m0
    masses = np.asarray(config.masses)
    n = config.n_planets

    def rhs(t, y):
        pos = y[:2 * n].reshape(n, 2)
        vel = y[2 * n:].reshape(n, 2)
        acc = np.zeros_like(pos)
        r3 = (np.linalg.norm(pos, axis=1) ** 3)
        for j in range(n):
            acc[j] = -G * (m0 + masses[j]) * pos[j] / r3[j]
            for k in range(n):
                if k == j:
                    continue
                d = pos[k] - pos[j]
                acc[j] += G * masses[k] * (d / np.linalg.norm(d) ** 3
                                           - pos[k] / r3[k])
        return np.concatenate([vel.ravel(), acc.ravel()])

    return rhs


def osculating_a(config: PlanetaryConfig, y: np.ndarray) -> np.ndarray:
    """Osculating semi-major axes from a heliocentric state vector."""
    n = config.n_planets
    pos = y[:2 * n].reshape(n, 2)
    vel = y[2 * n:].reshape(n, 2)
    out = np.zeros(n)
    for j in range(n):
        r = np.linalg.norm(pos[j])
        v2 = vel[j] @ vel[j]
        out[j] = 1.0 / (2.0 / r - v2 / config.gm(j))
    return out
