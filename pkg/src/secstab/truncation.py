"""Truncation policies shared by every series operation."""

from __future__ import annotations

from dataclasses import dataclass, replace

UNLIMITED = 1_000_000


@dataclass(frozen=True)
class TruncationPolicy:
    """Degree and size limits applied uniformly by the series arithmetic.

    Degrees are counted in natural units: ``max_action_degree`` bounds the
    total degree in action-like variables (L, p or I, where a power of
    sqrt(I) counts as 1/2), ``max_secular_degree`` bounds the total degree
    in the eccentricity-type cartesian variables, and ``max_trig_degree``
    bounds the L1 norm of the harmonic vector.  ``drop_threshold`` is the
    magnitude below which coefficients are discarded after every merge
    (0 keeps everything except exact zeros).

    ``value_scales`` (one radius per polynomial slot, empty = disabled)
    switches on a domain-aware drop: a term is discarded when its largest
    possible contribution over the polydisc |v_i| <= scale_i, namely
    |c| * prod(scale_i^e_i), falls below ``value_drop``.  Unlike a raw
    coefficient threshold this treats all degrees uniformly.
    """

    max_action_degree: int = UNLIMITED
    max_trig_degree: int = UNLIMITED
    max_secular_degree: int = UNLIMITED
    drop_threshold: float = 0.0
    value_drop: float = 0.0
    value_scales: tuple = ()

    def __post_init__(self):
        if self.max_action_degree < 0 or self.max_trig_degree < 0 \
                or self.max_secular_degree < 0:
            raise ValueError("truncation bounds must be nonnegative")
        if self.drop_threshold < 0 or self.value_drop < 0:
            raise ValueError("drop thresholds must be nonnegative")
        if self.value_scales and any(s <= 0 for s in self.value_scales):
            raise ValueError("value_scales must be positive")

    def with_(self, **kwargs) -> "TruncationPolicy":
        return replace(self, **kwargs)


#: No truncation at all (exact arithmetic on small test series).
EXACT = TruncationPolicy()


def desk_policy() -> TruncationPolicy:
    """Default desk-scale limits for the planetary expansion."""
    return TruncationPolicy(max_action_degree=1, max_trig_degree=8,
                            max_secular_degree=6, drop_threshold=0.0)


def paper_policy() -> TruncationPolicy:
    """Published truncation limits (memory-hungry; gate behind a flag)."""
    return TruncationPolicy(max_action_degree=1, max_trig_degree=16,
                            max_secular_degree=18, drop_threshold=0.0)
