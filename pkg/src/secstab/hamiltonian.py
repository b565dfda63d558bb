"""Hamiltonians organized into classes of fixed action and trig degree.

A class (l, s) holds the monomials of total action degree l whose harmonic
satisfies |k| in {2s-1, 2s}; the angle-free linear reference term omega.p is
kept separately because every normalization step treats it specially.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .series import (PoissonSeries, Representation, dalembert_filter,
                     lie_transform, merge, poisson_bracket)
from .truncation import EXACT, TruncationPolicy

__all__ = ["GradedComponent", "GradedHamiltonian", "regrade", "grade_keys"]


@dataclass(frozen=True)
class GradedComponent:
    l: int
    s: int
    series: PoissonSeries


def grade_keys(f: PoissonSeries):
    """Return per-term class labels (l, s) by actual degrees."""
    l2 = f.expo[:, list(f.rep.action_slots)].astype(np.int64).sum(axis=1) \
        if f.rep.action_slots else np.zeros(f.nterms, dtype=np.int64)
    if np.any(l2 % 2):
        raise ValueError("monomials with odd total sqrt-action degree "
                         "cannot be graded")
    ls = l2 // 2
    ks = f.trig_degrees()
    ss = (ks + 1) // 2
    return ls, ss


def regrade(f: PoissonSeries):
    """Split a series into graded components by actual (l, |k|).

    The union of the outputs reproduces the input term for term.
    """
    if f.is_zero:
        return []
    ls, ss = grade_keys(f)
    out = []
    for l, s in sorted(set(zip(ls.tolist(), ss.tolist()))):
        mask = (ls == l) & (ss == s)
        out.append(GradedComponent(int(l), int(s), f.select(mask)))
    return out


class GradedHamiltonian:
    """omega.p plus graded perturbation classes."""

    def __init__(self, rep: Representation, omega, classes: dict,
                 policy: TruncationPolicy = EXACT):
        self.rep = rep
        self.omega = np.asarray(omega, dtype=float)
        self.classes = {k: v for k, v in classes.items() if not v.is_zero}
        self.policy = policy

    @classmethod
    def from_series(cls, f: PoissonSeries, omega,
                    policy: TruncationPolicy = EXACT) -> "GradedHamiltonian":
        """Grade ``f``; the exact omega.p part is removed from class (1, 0)."""
        omega = np.asarray(omega, dtype=float)
        linear = PoissonSeries.linear(f.rep, -omega,
                                      slots=f.rep.action_slots)
        rest = f + linear
        classes = {(c.l, c.s): c.series for c in regrade(rest)}
        return cls(f.rep, omega, classes, policy)

    # -- access -------------------------------------------------------------
    def cls(self, l: int, s: int) -> PoissonSeries:
        return self.classes.get((l, s), PoissonSeries.zero(self.rep))

    def keys(self):
        return sorted(self.classes.keys())

    def sum_classes(self, pred) -> PoissonSeries:
        picked = [v for (l, s), v in sorted(self.classes.items())
                  if pred(l, s)]
        if not picked:
            return PoissonSeries.zero(self.rep)
        return merge(picked, self.policy)

    def linear_series(self) -> PoissonSeries:
        return PoissonSeries.linear(self.rep, self.omega,
                                    slots=self.rep.action_slots)

    def total(self, include_linear: bool = True) -> PoissonSeries:
        parts = [self.linear_series()] if include_linear else []
        parts += [v for _, v in sorted(self.classes.items())]
        if not parts:
            return PoissonSeries.zero(self.rep)
        return merge(parts, self.policy)

    def norms(self) -> dict:
        return {k: v.norm() for k, v in sorted(self.classes.items())}

    def perturbation_norm(self, max_l: int = 1,
                          include_s0: bool = False) -> float:
        """Sum of class norms with l <= max_l, the usual decay metric."""
        tot = 0.0
        for (l, s), v in self.classes.items():
            if l <= max_l and (s >= 1 or (include_s0 and l == 1)):
                tot += v.norm()
        return tot

    def max_action_degree(self) -> int:
        return max((l for l, _ in self.classes), default=0)

    # -- transforms -----------------------------------------------------------
    def lie_transformed(self, chi: PoissonSeries, shift=None,
                        max_order: int = 64) -> "GradedHamiltonian":
        """Apply exp(L_chi) (and an optional rigid action shift) and regrade.

        In the sqrt-action representation the result is cleaned of
        rounding dust on monomials the d'Alembert rules forbid.
        """
        new = lie_transform(chi, self.total(), self.policy,
                            max_order=max_order, shift=shift)
        if self.rep.half_exponents:
            new = dalembert_filter(new)
        return GradedHamiltonian.from_series(new, self.omega, self.policy)

    def derivative_omega(self, chi: PoissonSeries) -> PoissonSeries:
        """L_chi(omega.p) = sum_j omega_j d(chi)/dq_j."""
        parts = []
        for kind, qi, pi in self.rep.pairs:
            if kind != "angle":
                continue
            d = chi.angle_derivative(qi)
            if not d.is_zero:
                parts.append(d * self.omega[pi])
        if not parts:
            return PoissonSeries.zero(self.rep)
        return merge(parts, self.policy)

    def bracket(self, f, g, scope="full"):
        return poisson_bracket(f, g, scope, self.policy)

    def __repr__(self):
        nt = sum(v.nterms for v in self.classes.values())
        return (f"GradedHamiltonian({self.rep.name}, "
                f"{len(self.classes)} classes, {nt} terms)")
