"""Sparse truncated Poisson series.

A series is a finite sum of monomials

    c * v1^e1 ... vm^em * {sin|cos}(k1*t1 + ... + kn*tn)

over polynomial variables ``v`` (actions, or cartesian eccentricity-type
coordinates) and angles ``t``.  Exponents are stored doubled so that the
d'Alembert representation with half-integer powers of the actions uses the
same integer storage.  Harmonic vectors are kept in canonical sign form:
if the first nonzero component of k is negative the term is rewritten with
-k (flipping the sign of a sine coefficient), and the harmonic k = 0 only
ever carries a cosine.

All operations are pure and deterministic: terms are kept lexicographically
sorted, and merges always reduce in that fixed order, so results do not
depend on chunk sizes or thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .truncation import EXACT, TruncationPolicy

__all__ = [
    "Representation", "PoissonSeries", "translated_rep", "action_angle_rep",
    "cartesian_rep", "poincare_rep", "norm", "merge", "multiply",
    "poisson_bracket", "average_angles", "fourier_filter",
    "solve_homological", "lie_transform", "shift_actions", "convert_rep",
    "SmallDivisorError", "RepresentationError",
]

_CHUNK_PAIRS = 1 << 22


class RepresentationError(ValueError):
    """Operands live in incompatible representations."""


class SmallDivisorError(ArithmeticError):
    """A homological division hit a divisor below the configured floor."""

    def __init__(self, harmonic, divisor, floor):
        self.harmonic = tuple(int(k) for k in harmonic)
        self.divisor = float(divisor)
        self.floor = float(floor)
        super().__init__(
            f"divisor |k.omega| = {abs(self.divisor):.3e} below floor "
            f"{self.floor:.3e} for harmonic {self.harmonic}")


@dataclass(frozen=True)
class Representation:
    """Variable layout and canonical pairing of a series.

    ``pairs`` lists the canonical (coordinate, momentum) pairs: each entry
    is ``(kind, coord_index, mom_index)`` with ``kind`` either ``"angle"``
    (coordinate is an angle slot, momentum a polynomial slot) or ``"poly"``
    (both are polynomial slots — the cartesian secular pairs).  The sign
    convention is {coord, mom} = +1.
    """

    name: str
    poly_names: tuple
    angle_names: tuple
    pairs: tuple
    action_slots: tuple
    secular_slots: tuple
    half_exponents: bool = False

    @property
    def n_poly(self) -> int:
        return len(self.poly_names)

    @property
    def n_ang(self) -> int:
        return len(self.angle_names)

    def __eq__(self, other):
        return isinstance(other, Representation) and self.name == other.name \
            and self.poly_names == other.poly_names

    def __hash__(self):
        return hash((self.name, self.poly_names))


def translated_rep(n: int = 3) -> Representation:
    """Action-angle variables (p, q) with integer powers of p."""
    return Representation(
        name=f"translated{n}",
        poly_names=tuple(f"p{j + 1}" for j in range(n)),
        angle_names=tuple(f"q{j + 1}" for j in range(n)),
        pairs=tuple(("angle", j, j) for j in range(n)),
        action_slots=tuple(range(n)),
        secular_slots=(),
    )


def action_angle_rep(n: int = 3) -> Representation:
    """Action-angle variables (I, phi) carrying powers of sqrt(I)."""
    return Representation(
        name=f"actionangle{n}",
        poly_names=tuple(f"I{j + 1}" for j in range(n)),
        angle_names=tuple(f"phi{j + 1}" for j in range(n)),
        pairs=tuple(("angle", j, j) for j in range(n)),
        action_slots=tuple(range(n)),
        secular_slots=(),
        half_exponents=True,
    )


def cartesian_rep(n: int = 3, names=("x", "y")) -> Representation:
    """Cartesian secular variables; the pair is (coordinate y, momentum x)."""
    xs, ys = names
    return Representation(
        name=f"cartesian{n}:{xs}{ys}",
        poly_names=tuple(f"{xs}{j + 1}" for j in range(n))
        + tuple(f"{ys}{j + 1}" for j in range(n)),
        angle_names=(),
        pairs=tuple(("poly", n + j, j) for j in range(n)),
        action_slots=(),
        secular_slots=tuple(range(2 * n)),
    )


def poincare_rep(n: int = 3) -> Representation:
    """Planetary variables (L, lambda) x (xi, eta), paired (lambda, L) and
    (eta, xi)."""
    return Representation(
        name=f"poincare{n}",
        poly_names=tuple(f"L{j + 1}" for j in range(n))
        + tuple(f"xi{j + 1}" for j in range(n))
        + tuple(f"eta{j + 1}" for j in range(n)),
        angle_names=tuple(f"lam{j + 1}" for j in range(n)),
        pairs=tuple(("angle", j, j) for j in range(n))
        + tuple(("poly", 2 * n + j, n + j) for j in range(n)),
        action_slots=tuple(range(n)),
        secular_slots=tuple(range(n, 3 * n)),
    )


# ---------------------------------------------------------------------------
# core container


class PoissonSeries:
    """Immutable sparse Poisson series in canonical form."""

    __slots__ = ("rep", "expo", "harm", "sinf", "coef")

    def __init__(self, rep, expo, harm, sinf, coef, *, _canonical=False):
        self.rep = rep
        coef = np.asarray(coef, dtype=np.float64).reshape(-1)
        nt = coef.size
        expo = np.asarray(expo, dtype=np.int16).reshape(nt, rep.n_poly)
        harm = np.asarray(harm, dtype=np.int16).reshape(nt, rep.n_ang)
        sinf = np.asarray(sinf, dtype=bool).reshape(nt)
        if not _canonical:
            expo, harm, sinf, coef = _canonicalize(rep, expo, harm, sinf,
                                                   coef, EXACT)
        self.expo = expo
        self.harm = harm
        self.sinf = sinf
        self.coef = coef
        for arr in (self.expo, self.harm, self.sinf, self.coef):
            arr.setflags(write=False)

    # -- constructors -----------------------------------------------------
    @classmethod
    def zero(cls, rep) -> "PoissonSeries":
        return cls(rep, np.zeros((0, rep.n_poly)), np.zeros((0, rep.n_ang)),
                   np.zeros(0, bool), np.zeros(0), _canonical=True)

    @classmethod
    def constant(cls, rep, value) -> "PoissonSeries":
        return cls.from_terms(rep, [(value, (0,) * rep.n_poly,
                                     (0,) * rep.n_ang, False)])

    @classmethod
    def from_terms(cls, rep, terms: Iterable) -> "PoissonSeries":
        """Build from ``(coeff, exponents, harmonic, is_sin)`` tuples.

        ``exponents`` are natural (possibly half-integer) powers; they are
        doubled internally.
        """
        rows = list(terms)
        expo = np.zeros((len(rows), rep.n_poly), dtype=np.int16)
        harm = np.zeros((len(rows), rep.n_ang), dtype=np.int16)
        sinf = np.zeros(len(rows), dtype=bool)
        coef = np.zeros(len(rows))
        for i, (c, e, k, s) in enumerate(rows):
            d = np.round(2.0 * np.asarray(e, dtype=float)).astype(np.int16)
            if not np.allclose(2.0 * np.asarray(e, dtype=float), d):
                raise ValueError("exponents must be half-integers")
            expo[i] = d
            harm[i] = np.asarray(k, dtype=np.int16)
            sinf[i] = bool(s)
            coef[i] = float(c)
        return cls(rep, expo, harm, sinf, coef)

    @classmethod
    def linear(cls, rep, coeffs, slots=None) -> "PoissonSeries":
        """Sum of ``coeffs[j] * v_slot[j]`` over polynomial slots."""
        slots = rep.action_slots if slots is None else slots
        terms = []
        for c, sl in zip(coeffs, slots):
            e = [0.0] * rep.n_poly
            e[sl] = 1.0
            terms.append((c, e, (0,) * rep.n_ang, False))
        return cls.from_terms(rep, terms)

    # -- basic queries -----------------------------------------------------
    @property
    def nterms(self) -> int:
        return self.coef.size

    @property
    def is_zero(self) -> bool:
        return self.coef.size == 0

    def norm(self) -> float:
        """Sum of absolute values of the stored coefficients."""
        return float(np.abs(self.coef).sum())

    def action_degrees(self) -> np.ndarray:
        if not self.rep.action_slots:
            return np.zeros(self.nterms)
        return self.expo[:, list(self.rep.action_slots)].sum(axis=1) / 2.0

    def secular_degrees(self) -> np.ndarray:
        if not self.rep.secular_slots:
            return np.zeros(self.nterms)
        return self.expo[:, list(self.rep.secular_slots)].sum(axis=1) / 2.0

    def trig_degrees(self) -> np.ndarray:
        if self.rep.n_ang == 0:
            return np.zeros(self.nterms, dtype=np.int64)
        return np.abs(self.harm.astype(np.int64)).sum(axis=1)

    def __repr__(self):
        return (f"PoissonSeries({self.rep.name}, {self.nterms} terms, "
                f"norm={self.norm():.6g})")

    # -- linear structure ---------------------------------------------------
    def _check(self, other):
        if self.rep != other.rep:
            raise RepresentationError(
                f"mixed representations {self.rep.name} / {other.rep.name}")

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = PoissonSeries.constant(self.rep, other)
        self._check(other)
        return PoissonSeries(
            self.rep,
            np.concatenate([self.expo, other.expo]),
            np.concatenate([self.harm, other.harm]),
            np.concatenate([self.sinf, other.sinf]),
            np.concatenate([self.coef, other.coef]))

    __radd__ = __add__

    def __neg__(self):
        return PoissonSeries(self.rep, self.expo, self.harm, self.sinf,
                             -self.coef, _canonical=True)

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            if other == 0:
                return PoissonSeries.zero(self.rep)
            return PoissonSeries(self.rep, self.expo, self.harm, self.sinf,
                                 other * self.coef, _canonical=True)
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / scalar)

    def scaled(self, factor) -> "PoissonSeries":
        return self * factor

    # -- selections ----------------------------------------------------------
    def select(self, mask) -> "PoissonSeries":
        return PoissonSeries(self.rep, self.expo[mask], self.harm[mask],
                             self.sinf[mask], self.coef[mask],
                             _canonical=True)

    def truncated(self, policy: TruncationPolicy) -> "PoissonSeries":
        mask = _policy_mask(self.rep, self.expo, self.harm, policy)
        if policy.drop_threshold > 0:
            mask &= np.abs(self.coef) > policy.drop_threshold
        if mask.all():
            return self
        return self.select(mask)

    # -- calculus -------------------------------------------------------------
    def poly_derivative(self, slot: int) -> "PoissonSeries":
        """Derivative with respect to polynomial variable ``slot``."""
        keep = self.expo[:, slot] != 0
        expo = self.expo[keep].copy()
        coef = self.coef[keep] * (expo[:, slot] / 2.0)
        expo[:, slot] -= 2
        return PoissonSeries(self.rep, expo, self.harm[keep],
                             self.sinf[keep], coef, _canonical=True)

    def angle_derivative(self, slot: int) -> "PoissonSeries":
        """Derivative with respect to angle ``slot`` (parity swap)."""
        k = self.harm[:, slot].astype(np.float64)
        keep = k != 0
        coef = np.where(self.sinf, k, -k)[keep] * self.coef[keep]
        return PoissonSeries(self.rep, self.expo[keep], self.harm[keep],
                             ~self.sinf[keep], coef)

    # -- evaluation -------------------------------------------------------------
    def evaluate(self, poly_values, angle_values=None) -> np.ndarray:
        """Evaluate numerically at one or many phase-space points.

        ``poly_values`` has shape (..., n_poly); in a half-exponent
        representation the action values must be nonnegative.
        """
        pv = np.asarray(poly_values, dtype=float)
        squeeze = pv.ndim == 1
        pv = np.atleast_2d(pv)
        if self.is_zero:
            out = np.zeros(pv.shape[0])
            return out[0] if squeeze else out
        powers = pv[:, None, :] ** (self.expo[None, :, :] / 2.0)
        mono = powers.prod(axis=2)
        if self.rep.n_ang:
            av = np.atleast_2d(np.asarray(angle_values, dtype=float))
            phase = av @ self.harm.astype(float).T
            trig = np.where(self.sinf[None, :], np.sin(phase), np.cos(phase))
            mono = mono * trig
        out = mono @ self.coef
        return out[0] if squeeze else out

    def gradient_series(self):
        """All polynomial and angle partial derivatives, in slot order."""
        polys = [self.poly_derivative(j) for j in range(self.rep.n_poly)]
        angs = [self.angle_derivative(j) for j in range(self.rep.n_ang)]
        return polys, angs

    def terms(self):
        """Iterate ``(coeff, exponents, harmonic, is_sin)`` with natural
        exponents."""
        for i in range(self.nterms):
            yield (float(self.coef[i]), self.expo[i] / 2.0,
                   tuple(int(v) for v in self.harm[i]), bool(self.sinf[i]))

    def key_hash(self) -> int:
        """Order-independent structural hash (used by determinism tests)."""
        return hash((self.rep.name, self.expo.tobytes(), self.harm.tobytes(),
                     self.sinf.tobytes(), self.coef.tobytes()))


# ---------------------------------------------------------------------------
# canonical form helpers


def _policy_mask(rep, expo, harm, policy: TruncationPolicy):
    mask = np.ones(expo.shape[0], dtype=bool)
    if rep.action_slots and policy.max_action_degree < 1_000_000:
        deg = expo[:, list(rep.action_slots)].astype(np.int64).sum(axis=1)
        mask &= deg <= 2 * policy.max_action_degree
    if rep.secular_slots and policy.max_secular_degree < 1_000_000:
        deg = expo[:, list(rep.secular_slots)].astype(np.int64).sum(axis=1)
        mask &= deg <= 2 * policy.max_secular_degree
    if rep.n_ang and policy.max_trig_degree < 1_000_000:
        mask &= np.abs(harm.astype(np.int64)).sum(axis=1) \
            <= policy.max_trig_degree
    return mask


def _canonical_harmonics(harm, sinf, coef):
    """Flip harmonics so the first nonzero component is positive."""
    if harm.shape[1] == 0:
        keep = ~sinf  # sin(0) vanishes identically
        return harm[keep], sinf[keep], coef[keep], keep
    nz = harm != 0
    first = np.where(nz.any(axis=1), nz.argmax(axis=1), -1)
    rows = np.arange(harm.shape[0])
    lead = np.where(first >= 0, harm[rows, np.maximum(first, 0)], 0)
    flip = lead < 0
    if flip.any():
        harm = np.where(flip[:, None], -harm, harm)
        coef = np.where(flip & sinf, -coef, coef)
    keep = ~((first < 0) & sinf)
    return harm[keep], sinf[keep], coef[keep], keep


def _pack_rows(expo, harm, sinf):
    """Order-preserving int64 packing of term keys, or None if too wide.

    Columns are offset to be nonnegative and laid out most-significant
    first, so sorting the packed keys sorts rows lexicographically.
    """
    cols = [expo[:, j].astype(np.int64) for j in range(expo.shape[1])] \
        + [harm[:, j].astype(np.int64) for j in range(harm.shape[1])] \
        + [sinf.astype(np.int64)]
    widths = []
    offs = []
    for c in cols:
        lo = int(c.min()) if c.size else 0
        hi = int(c.max()) if c.size else 0
        offs.append(lo)
        widths.append(max(hi - lo + 1, 1))
    total_bits = sum(int(w - 1).bit_length() or 1 for w in widths)
    if total_bits > 62:
        return None
    key = np.zeros(cols[0].shape, dtype=np.int64)
    for c, off, w in zip(cols, offs, widths):
        key = key * w + (c - off)
    return key


def _canonicalize(rep, expo, harm, sinf, coef, policy: TruncationPolicy):
    harm, sinf, coef, keep = _canonical_harmonics(harm, sinf, coef)
    expo = expo[keep]
    mask = _policy_mask(rep, expo, harm, policy)
    if not mask.all():
        expo, harm, sinf, coef = expo[mask], harm[mask], sinf[mask], coef[mask]
    if coef.size == 0:
        return (expo.reshape(0, rep.n_poly), harm.reshape(0, rep.n_ang),
                sinf, coef)
    key = _pack_rows(expo, harm, sinf)
    if key is not None:
        order = np.argsort(key, kind="stable")
        key = key[order]
        group_start = np.flatnonzero(
            np.concatenate(([True], key[1:] != key[:-1])))
    else:
        keys = [sinf.astype(np.int16)]
        for j in range(rep.n_ang - 1, -1, -1):
            keys.append(harm[:, j])
        for j in range(rep.n_poly - 1, -1, -1):
            keys.append(expo[:, j])
        order = np.lexsort(keys)
        e_s = expo[order]
        h_s = harm[order]
        s_s = sinf[order]
        group_start = np.flatnonzero(
            np.concatenate(([True], ~(np.all(e_s[1:] == e_s[:-1], axis=1)
                                      & np.all(h_s[1:] == h_s[:-1], axis=1)
                                      & (s_s[1:] == s_s[:-1])))))
    expo, harm, sinf, coef = expo[order], harm[order], sinf[order], coef[order]
    sums = np.add.reduceat(coef, group_start)
    expo = expo[group_start]
    harm = harm[group_start]
    sinf = sinf[group_start]
    thr = policy.drop_threshold
    keep = np.abs(sums) > thr if thr > 0 else sums != 0.0
    if policy.value_scales and policy.value_drop > 0:
        logs = 0.5 * np.log(np.asarray(policy.value_scales, dtype=float))
        reach = np.abs(sums) * np.exp(expo.astype(np.float64) @ logs)
        keep &= reach > policy.value_drop
    return expo[keep], harm[keep], sinf[keep], sums[keep]


# ---------------------------------------------------------------------------
# ring operations


def merge(series_list: Sequence[PoissonSeries],
          policy: TruncationPolicy = EXACT) -> PoissonSeries:
    """Sum a list of series with a single deterministic merge."""
    series_list = [s for s in series_list if s is not None]
    if not series_list:
        raise ValueError("merge of empty list")
    rep = series_list[0].rep
    for s in series_list[1:]:
        if s.rep != rep:
            raise RepresentationError("merge across representations")
    expo = np.concatenate([s.expo for s in series_list])
    harm = np.concatenate([s.harm for s in series_list])
    sinf = np.concatenate([s.sinf for s in series_list])
    coef = np.concatenate([s.coef for s in series_list])
    e, h, sf, c = _canonicalize(rep, expo, harm, sinf, coef, policy)
    return PoissonSeries(rep, e, h, sf, c, _canonical=True)


def _degree_vectors(f, policy):
    """Per-term doubled degrees entering the pairwise truncation masks."""
    rep = f.rep
    out = []
    if rep.action_slots and policy.max_action_degree < 1_000_000:
        out.append((f.expo[:, list(rep.action_slots)].astype(np.int32)
                    .sum(axis=1), 2 * policy.max_action_degree))
    if rep.secular_slots and policy.max_secular_degree < 1_000_000:
        out.append((f.expo[:, list(rep.secular_slots)].astype(np.int32)
                    .sum(axis=1), 2 * policy.max_secular_degree))
    return out


def multiply(f: PoissonSeries, g: PoissonSeries,
             policy: TruncationPolicy = EXACT) -> PoissonSeries:
    """Product of two series, truncated per ``policy``.

    Pairs that violate the polynomial degree caps are pruned before any
    product row is materialized; every chunk is merged immediately, so peak
    memory stays proportional to the truncated output size.
    """
    f._check(g)
    rep = f.rep
    if f.is_zero or g.is_zero:
        return PoissonSeries.zero(rep)
    na, nb = f.nterms, g.nterms
    chunk = max(1, _CHUNK_PAIRS // max(nb, 1))
    degs_f = _degree_vectors(f, policy)
    degs_g = _degree_vectors(g, policy)
    reach_f = reach_g = None
    if policy.value_drop > 0 and policy.value_scales:
        logs = 0.5 * np.log(np.asarray(policy.value_scales, dtype=float))
        with np.errstate(divide="ignore"):
            reach_f = (np.log(np.abs(f.coef))
                       + f.expo.astype(np.float64) @ logs).astype(np.float32)
            reach_g = (np.log(np.abs(g.coef))
                       + g.expo.astype(np.float64) @ logs).astype(np.float32)
        log_floor = np.float32(np.log(policy.value_drop))
    partials = []
    for lo in range(0, na, chunk):
        hi = min(lo + chunk, na)
        mask = np.ones((hi - lo, nb), dtype=bool)
        for (df, cap), (dg, _) in zip(degs_f, degs_g):
            mask &= (df[lo:hi, None] + dg[None, :]) <= cap
        if reach_f is not None:
            # |c1 c2| sigma^(e1+e2) <= reach1 * reach2, so pairs whose
            # combined reach is already below the floor never survive
            mask &= (reach_f[lo:hi, None] + reach_g[None, :]) > log_floor
        ii, jj = np.nonzero(mask)
        if ii.size == 0:
            continue
        ii = ii + lo
        expo = f.expo[ii] + g.expo[jj]
        cc = f.coef[ii] * g.coef[jj]
        if rep.n_ang == 0:
            e, h, sf_, c = _canonicalize(
                rep, expo, np.zeros((ii.size, 0), np.int16),
                np.zeros(ii.size, bool), cc, policy)
            partials.append((e, h, sf_, c))
            continue
        kf = f.harm[ii]
        kg = g.harm[jj]
        sf = f.sinf[ii]
        sg = g.sinf[jj]
        # product parities: cos*cos and sin*sin give cosines, else sines
        out_sin = sf ^ sg
        # half-coefficient signs:
        #   cos cos -> +1/2 cos(+) +1/2 cos(-)   sin sin -> -1/2 cos(+) +1/2 cos(-)
        #   sin cos -> +1/2 sin(+) +1/2 sin(-)   cos sin -> +1/2 sin(+) -1/2 sin(-)
        sign_plus = np.where(sf & sg, -0.5, 0.5)
        sign_minus = np.where(~sf & sg, -0.5, 0.5)
        e2 = np.concatenate([expo, expo])
        h2 = np.concatenate([kf + kg, kf - kg])
        s2 = np.concatenate([out_sin, out_sin])
        c2 = np.concatenate([cc * sign_plus, cc * sign_minus])
        partials.append(_canonicalize(rep, e2, h2, s2, c2, policy))
    if not partials:
        return PoissonSeries.zero(rep)
    expo = np.concatenate([p[0] for p in partials])
    harm = np.concatenate([p[1] for p in partials])
    sinf = np.concatenate([p[2] for p in partials])
    coef = np.concatenate([p[3] for p in partials])
    e, h, sf_, c = _canonicalize(rep, expo, harm, sinf, coef, policy)
    return PoissonSeries(rep, e, h, sf_, c, _canonical=True)


def norm(f: PoissonSeries) -> float:
    """Sum of absolute values of all stored coefficients."""
    return f.norm()


def average_angles(f: PoissonSeries, which=None) -> PoissonSeries:
    """Keep the terms whose harmonic vanishes on the given angle subset."""
    if f.rep.n_ang == 0 or f.is_zero:
        return f
    idx = list(range(f.rep.n_ang)) if which is None else list(which)
    mask = np.all(f.harm[:, idx] == 0, axis=1)
    return f.select(mask)


def fourier_filter(f: PoissonSeries, K: int) -> PoissonSeries:
    """Keep harmonics with 0 < |k| <= K (drops the angular average)."""
    if K < 1:
        raise ValueError("filter order must be >= 1")
    deg = f.trig_degrees()
    return f.select((deg > 0) & (deg <= K))


def poisson_bracket(f: PoissonSeries, g: PoissonSeries, scope: str = "full",
                    policy: TruncationPolicy = EXACT) -> PoissonSeries:
    """{f, g} = sum over pairs of df/dq dg/dp - df/dp dg/dq.

    ``scope`` selects the canonical pairs entering the sum: "full" uses all
    of them, "fast" only the angle/action pairs and "secular" only the
    cartesian pairs.  The latter two require a representation that has both
    kinds of pairs.
    """
    f._check(g)
    rep = f.rep
    if scope not in ("full", "fast", "secular"):
        raise ValueError(f"unknown bracket scope {scope!r}")
    pairs = [p for p in rep.pairs
             if scope == "full"
             or (scope == "fast" and p[0] == "angle")
             or (scope == "secular" and p[0] == "poly")]
    if scope != "full" and (not pairs or len(pairs) == len(rep.pairs)):
        raise RepresentationError(
            f"scope {scope!r} needs a partitioned representation, "
            f"got {rep.name}")
    pieces = []
    for kind, qi, pi in pairs:
        dfq = f.angle_derivative(qi) if kind == "angle" \
            else f.poly_derivative(qi)
        dgq = g.angle_derivative(qi) if kind == "angle" \
            else g.poly_derivative(qi)
        dfp = f.poly_derivative(pi)
        dgp = g.poly_derivative(pi)
        if not (dfq.is_zero or dgp.is_zero):
            pieces.append(multiply(dfq, dgp, policy))
        if not (dfp.is_zero or dgq.is_zero):
            pieces.append(-multiply(dfp, dgq, policy))
    if not pieces:
        return PoissonSeries.zero(rep)
    return merge(pieces, policy)


def solve_homological(omega, f: PoissonSeries, divisor_floor: float = 0.0,
                      angle_slots=None) -> PoissonSeries:
    """Solve sum_j omega_j d(chi)/dq_j + f = 0 for chi with <chi> = 0.

    Every term of ``f`` must carry a nonzero harmonic over the selected
    angles; the division by k.omega swaps sin and cos with the signs fixed
    by the derivative rule.  A divisor with |k.omega| <= divisor_floor
    raises :class:`SmallDivisorError` naming the offending harmonic.
    """
    rep = f.rep
    if f.is_zero:
        return f
    omega = np.asarray(omega, dtype=float)
    slots = list(range(rep.n_ang)) if angle_slots is None else list(angle_slots)
    ksub = f.harm[:, slots].astype(np.float64)
    if np.any(np.all(ksub == 0, axis=1)):
        raise ValueError("homological right-hand side has nonzero average")
    div = ksub @ omega
    bad = np.abs(div) <= divisor_floor
    if bad.any():
        i = int(np.argmax(bad))
        raise SmallDivisorError(f.harm[i], div[i], divisor_floor)
    # cos term c: chi gets sin with -c/d;  sin term c: chi gets cos with +c/d
    coef = np.where(f.sinf, f.coef / div, -f.coef / div)
    return PoissonSeries(rep, f.expo, f.harm, ~f.sinf, coef)


def lie_transform(chi: PoissonSeries, H: PoissonSeries,
                  policy: TruncationPolicy = EXACT, max_order: int = 64,
                  shift=None) -> PoissonSeries:
    """exp(L_chi) H with L_chi f = {chi, f}, truncated per ``policy``.

    The optional ``shift`` vector adds the generator xi.q, whose exponential
    is the exact rigid translation of the actions by xi; it commutes with
    the trigonometric part of the generator, so it is applied afterwards in
    closed form.
    """
    term = H
    acc = [H]
    for j in range(1, max_order + 1):
        term = poisson_bracket(chi, term, "full", policy) * (1.0 / j)
        if term.is_zero:
            break
        acc.append(term)
    out = merge(acc, policy)
    if shift is not None and np.any(np.asarray(shift) != 0):
        out = shift_actions(out, shift, policy)
    return out


def shift_actions(f: PoissonSeries, delta,
                  policy: TruncationPolicy = EXACT) -> PoissonSeries:
    """Exact substitution p -> p + delta on integer-exponent actions."""
    rep = f.rep
    if rep.half_exponents:
        raise RepresentationError("rigid shifts need integer exponents")
    delta = np.asarray(delta, dtype=float)
    slots = list(rep.action_slots)
    out = f
    for sl, d in zip(slots, delta):
        if d == 0.0:
            continue
        pieces = []
        emax = int(out.expo[:, sl].max()) // 2 if out.nterms else 0
        for e in range(emax + 1):
            rows = out.expo[:, sl] == 2 * e
            if not rows.any():
                continue
            base = out.select(rows)
            for m in range(e + 1):
                binom = _binomial(e, m) * d ** (e - m)
                expo = base.expo.copy()
                expo[:, sl] = 2 * m
                pieces.append(PoissonSeries(rep, expo, base.harm, base.sinf,
                                            base.coef * binom,
                                            _canonical=True))
        out = merge(pieces, policy)
    return out


def _binomial(n: int, k: int) -> float:
    out = 1.0
    for i in range(k):
        out *= (n - i) / (i + 1)
    return out


def dalembert_filter(f: PoissonSeries) -> PoissonSeries:
    """Drop terms violating the d'Alembert structure of sqrt-action series.

    Functions that are polynomials in the underlying cartesian pair
    satisfy, variable by variable, |k_m| <= i_m with equal parity (i_m the
    power of sqrt(I_m)).  Iterated brackets of such series leave rounding
    dust on the forbidden monomials; this removes it exactly.
    """
    if not f.rep.half_exponents or f.is_zero:
        return f
    i_m = f.expo.astype(np.int64)
    k_m = np.abs(f.harm.astype(np.int64))
    ok = np.all((k_m <= i_m) & ((i_m - k_m) % 2 == 0), axis=1)
    return f.select(ok)


def convert_rep(f: PoissonSeries, rep: Representation, poly_map,
                angle_map=None) -> PoissonSeries:
    """Relabel variable slots into another representation.

    ``poly_map[j]`` gives the destination slot of source polynomial slot j
    (None drops the requirement that the exponent be zero -- an exception is
    raised if a dropped slot carries a nonzero exponent).
    """
    expo = np.zeros((f.nterms, rep.n_poly), dtype=np.int16)
    for src, dst in enumerate(poly_map):
        if dst is None:
            if np.any(f.expo[:, src] != 0):
                raise ValueError("dropped polynomial slot carries exponents")
        else:
            expo[:, dst] = f.expo[:, src]
    harm = np.zeros((f.nterms, rep.n_ang), dtype=np.int16)
    if angle_map is not None:
        for src, dst in enumerate(angle_map):
            if dst is None:
                if np.any(f.harm[:, src] != 0):
                    raise ValueError("dropped angle slot carries harmonics")
            else:
                harm[:, dst] = f.harm[:, src]
    elif f.rep.n_ang and rep.n_ang == 0:
        if np.any(f.harm != 0):
            raise ValueError("cannot drop angles carrying harmonics")
    return PoissonSeries(rep, expo, harm, f.sinf, f.coef)
