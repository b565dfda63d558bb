"""Effective stability around the torus: majorants and escape times.

The normal form around the invariant torus is pushed one action degree at
a time by a two-index scheme: step (r, g) removes the trigonometric
degree-2g part of the degree-r perturbation.  Running the recurrences on
the class norms alone (majorants) instead of the series reaches far higher
orders; the escape-time bound is then optimized over the normalization
order for every starting distance rho0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import GradedHamiltonian
from .series import PoissonSeries, SmallDivisorError, solve_homological

__all__ = [
    "TorusBirkhoffState", "MajorantTable", "StabilityResult",
    "birkhoff_torus_step", "alpha_min", "init_majorants", "majorant_step",
    "advance_degree", "run_majorants", "stability_time", "stability_curve",
    "action_uncertainty",
]


@dataclass
class TorusBirkhoffState:
    """Explicit two-index normalization state.

    Classes are booked at the generation indices (l, s) of the recurrences,
    under which the step (r, g) empties the slots (r, 1..g) exactly; the
    monomials inside a class have trigonometric degree at most 2s.
    """

    omega: np.ndarray
    classes: dict
    r: int
    g: int
    policy: object
    divisor_floor: float = 0.0

    def cls(self, l, s) -> PoissonSeries:
        key = (l, s)
        if key in self.classes:
            return self.classes[key]
        rep = next(iter(self.classes.values())).rep
        return PoissonSeries.zero(rep)

    def norms(self) -> dict:
        return {k: v.norm() for k, v in sorted(self.classes.items())
                if not v.is_zero}


@dataclass
class MajorantTable:
    """Nonnegative bounds F[(l, s)] on the class norms at stage (r, g)."""

    F: dict
    r: int
    g: int
    alpha: dict
    s_max_factor: int          # trig cap / 2: tail cutoff slope
    G_last: float = 0.0

    def value(self, l, s) -> float:
        return self.F.get((l, s), 0.0)

    def copy_shifted(self, r, g) -> "MajorantTable":
        return MajorantTable(dict(self.F), r, g, dict(self.alpha),
                             self.s_max_factor, self.G_last)


@dataclass
class StabilityResult:
    rho0: float
    tau_by_r: dict
    r_opt: int
    T: float
    rho_opt: float


# ---------------------------------------------------------------------------
# explicit steps


def from_normal_form(H: GradedHamiltonian, divisor_floor: float = 0.0
                     ) -> TorusBirkhoffState:
    """Reinterpret a Kolmogorov output as the degree-two starting state.

    The constant and any residual classes of action degree below two are
    dropped (they are normalization residues far below the working
    precision, not part of the restart structure).
    """
    classes = {k: v for k, v in H.classes.items() if k[0] >= 2}
    return TorusBirkhoffState(np.asarray(H.omega, float), classes, 2, 0,
                              H.policy, divisor_floor)


def birkhoff_torus_step(state: TorusBirkhoffState, r: int, g: int
                        ) -> TorusBirkhoffState:
    """One (r, g) step: remove the trig-degree-2g part of the degree-r
    classes and book every Lie increment at its generation indices."""
    target_full = state.cls(r, g)
    rep = None
    for v in state.classes.values():
        rep = v.rep
        break
    if rep is None:
        raise ValueError("empty state")
    classes = dict(state.classes)
    if target_full.is_zero:
        return TorusBirkhoffState(state.omega, classes, r, g, state.policy,
                                  state.divisor_floor)
    avg = target_full.select(target_full.trig_degrees() == 0)
    osc = target_full.select(target_full.trig_degrees() != 0)

    def book(l, s, series):
        if series.is_zero:
            return
        key = (l, s)
        classes[key] = classes[key] + series if key in classes else series

    # promotion of the angle average into the normal-form part
    classes.pop((r, g), None)
    book(r, 0, avg)
    if osc.is_zero:
        return TorusBirkhoffState(state.omega, classes, r, g, state.policy,
                                  state.divisor_floor)
    gen = solve_homological(state.omega, osc, state.divisor_floor)

    from .series import poisson_bracket

    # the chain on omega.p: the j = 1 term cancels the oscillating part
    # (already removed above); higher terms re-enter with a sign
    term = osc
    j = 1
    while True:
        j += 1
        term = poisson_bracket(gen, term, "full", state.policy) * (1.0 / j)
        if term.is_zero or j > 40:
            break
        book(j * (r - 1) + 1, j * g, -term)
    # the chain on every other class
    for (l, s) in sorted(state.classes.keys()):
        if (l, s) == (r, g):
            continue
        f = state.classes[(l, s)]
        term = f
        j = 0
        while True:
            j += 1
            term = poisson_bracket(gen, term, "full", state.policy) \
                * (1.0 / j)
            if term.is_zero or j > 40:
                break
            book(l + j * (r - 1), s + j * g, term)
    out = TorusBirkhoffState(state.omega, classes, r, g, state.policy,
                             state.divisor_floor)
    out.generator = gen
    return out


# ---------------------------------------------------------------------------
# majorants


def alpha_min(omega, g: int) -> float:
    """min |k.omega| over 0 < |k| <= 2g, by exhaustive search."""
    omega = np.asarray(omega, dtype=float)
    n = omega.size
    K = 2 * g
    rng = np.arange(-K, K + 1)
    grids = np.meshgrid(*([rng] * n), indexing="ij")
    kk = np.stack([a.ravel() for a in grids], axis=1)
    deg = np.abs(kk).sum(axis=1)
    kk = kk[(deg > 0) & (deg <= K)]
    vals = np.abs(kk @ omega)
    best = float(vals.min())
    if best == 0.0:
        k = kk[int(np.argmin(vals))]
        raise SmallDivisorError(k, 0.0, 0.0)
    return best


def init_majorants(state: TorusBirkhoffState, max_l: int, max_s: int
                   ) -> MajorantTable:
    """Class norms of the explicit starting Hamiltonian, zero outside the
    truncation window."""
    F = {}
    for (l, s), v in state.classes.items():
        if 2 <= l <= max_l and 0 <= s <= max_s:
            F[(l, s)] = v.norm()
    return MajorantTable(F, 2, 0, {}, max_s)


def majorant_step(table: MajorantTable, r: int, g: int, omega,
                  j_rel_floor: float = 1e-16, max_l: int = None,
                  max_s: int = None) -> MajorantTable:
    """Norm-level image of one (r, g) step.

    G bounds the generating function through the small divisor; the
    removed slot is promoted to the normal-form part and every Lie
    increment is accumulated with the product factor
    prod 2[(s + i g) r + (l + i (r-1)) g] G / j!.
    """
    if g not in table.alpha:
        table.alpha[g] = alpha_min(omega, g)
    a = table.alpha[g]
    F = dict(table.F)
    src = F.get((r, g), 0.0)
    G = src / a
    out = MajorantTable(F, r, g, table.alpha, table.s_max_factor, G)
    if src == 0.0:
        F.pop((r, g), None)
        return out
    # promotion
    F[(r, 0)] = F.get((r, 0), 0.0) + src
    F.pop((r, g), None)

    def book(l, s, val):
        if val <= 0.0:
            return
        if max_l is not None and l > max_l:
            return
        if max_s is not None and s > max_s:
            return
        F[(l, s)] = F.get((l, s), 0.0) + val

    # chain on omega.p (j >= 2); the per-order ratio keeps the running
    # value finite even when the first increments grow
    val = src
    for j in range(2, 400):
        i = j - 1
        val *= 2.0 * (i * r + (i * (r - 1) + 1)) * g * G / j
        if not math.isfinite(val):
            book(j * (r - 1) + 1, j * g, math.inf)
            break
        book(j * (r - 1) + 1, j * g, val)
        if val < j_rel_floor * src:
            break
    # chain on the other classes
    for (l, s), base in list(table.F.items()):
        if (l, s) == (r, g) or base == 0.0 or not math.isfinite(base):
            continue
        val = base
        for j in range(1, 400):
            i = j - 1
            val *= 2.0 * ((s + i * g) * r + (l + i * (r - 1)) * g) * G / j
            if not math.isfinite(val):
                book(l + j * (r - 1), s + j * g, math.inf)
                break
            book(l + j * (r - 1), s + j * g, val)
            if val < j_rel_floor * base:
                break
    return out


def advance_degree(table: MajorantTable, r: int) -> MajorantTable:
    """Relabel the completed degree-r sweep as the (r+1, 0) stage."""
    expected = table.s_max_factor * (r - 1)
    if table.g < expected:
        raise ValueError(f"degree-{r} sweep incomplete: g = {table.g} "
                         f"< {expected}")
    return MajorantTable(dict(table.F), r + 1, 0, dict(table.alpha),
                         table.s_max_factor, table.G_last)


def run_majorants(table: MajorantTable, omega, r_max: int,
                  max_l: int = None, max_s: int = None):
    """Sweep the majorant recurrences through degrees 2..r_max.

    Returns the list of tables at stages (r, 0) for r = 2..r_max+1; the
    remainder row of table r+1 feeds the escape-time bound of order r.
    """
    tables = {2: table}
    cur = table
    for r in range(2, r_max + 1):
        s_stop = table.s_max_factor * (r - 1)
        for g in range(1, s_stop + 1):
            cur = majorant_step(cur, r, g, omega, max_l=max_l, max_s=max_s)
        cur = advance_degree(cur, r)
        tables[r + 1] = cur
    return tables


# ---------------------------------------------------------------------------
# escape time


def tail_weight(table: MajorantTable, r: int) -> float:
    """sum_s s F_{r+1}^{(r+1,0;s)}, the remainder weight of order r."""
    tot = 0.0
    for (l, s), v in table.F.items():
        if l == r + 1:
            tot += s * v
    return tot


def tau_tilde(weight: float, rho0: float, r: int) -> float:
    """Escape-time bound at fixed order r, optimized over the outer radius."""
    if weight <= 0.0:
        return math.inf
    return (r ** r / (r + 1) ** (r + 1)) / (2.0 * weight * rho0 ** r)


def tau_raw(weight: float, rho0: float, rho: float, r: int) -> float:
    """Unoptimized bound (rho - rho0) / (2 rho^(r+1) sum s F)."""
    if weight <= 0.0:
        return math.inf
    return (rho - rho0) / (2.0 * rho ** (r + 1) * weight)


def stability_time(tables: dict, rho0: float, r_max: int) -> StabilityResult:
    """Best escape-time bound over the computed normalization orders."""
    if rho0 <= 0:
        raise ValueError("rho0 must be positive")
    tau = {}
    for r in range(1, r_max + 1):
        if r + 1 not in tables:
            continue
        w = tail_weight(tables[r + 1], r)
        tau[r] = tau_tilde(w, rho0, r)
    if not tau:
        raise ValueError("no remainder majorants available")
    finite = {r: t for r, t in tau.items() if math.isfinite(t)}
    if not finite:
        r_opt = min(tau)
        return StabilityResult(rho0, tau, r_opt, math.inf,
                               (r_opt + 1) * rho0 / r_opt)
    r_opt = max(finite, key=lambda r: (finite[r], -r))
    best = finite[r_opt]
    for r in sorted(finite):
        if finite[r] == best:
            r_opt = r
            break
    return StabilityResult(rho0, tau, r_opt, best,
                           (r_opt + 1) * rho0 / r_opt)


def stability_curve(tables: dict, rho0_grid, r_max: int):
    """T(rho0) and r_opt(rho0) over a grid of starting distances."""
    out = []
    for rho0 in rho0_grid:
        out.append(stability_time(tables, float(rho0), r_max))
    return out


def action_uncertainty(config, dxi=None, deta=None):
    """Observational action uncertainty: sum over Jupiter and Saturn of
    |xi| dxi + |eta| deta."""
    from .planetary import poincare_from_elements
    st = poincare_from_elements(config)
    dxi = np.asarray(config.delta_xi if dxi is None else dxi, dtype=float)
    deta = np.asarray(config.delta_eta if deta is None else deta,
                      dtype=float)
    dI = np.abs(st.xi[:dxi.size]) * dxi + np.abs(st.eta[:deta.size]) * deta
    return float(dI[:2].sum())
