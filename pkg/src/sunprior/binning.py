"""Bin-residual normalization of solar altitude.

An altitude ``a`` is mapped to ``(Q(a) + R(a)) / K`` where ``Q`` is the index
of the bin containing ``a`` and ``R`` the offset inside that bin scaled to
[0, 1]. Narrow bins around twilight therefore get as much of the unit range
as the wide daytime bin.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError

DEFAULT_BINS = "a_min,-6,-4,-2,a_max"


@dataclass(frozen=True)
class BinScheme:
    edges: tuple

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 2:
            raise DomainError("a bin scheme needs at least two edges")
        if not all(math.isfinite(e) for e in edges):
            raise DomainError(f"bin edges must be finite: {edges}")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise DomainError(f"bin edges must be strictly increasing: {edges}")
        object.__setattr__(self, "edges", edges)

    @property
    def K(self):
        return len(self.edges) - 1

    @property
    def lower(self):
        return self.edges[0]

    @property
    def upper(self):
        return self.edges[-1]

    def interval(self, i):
        return self.edges[i], self.edges[i + 1]

    def to_json(self):
        return json.dumps(list(self.edges))

    @classmethod
    def from_json(cls, text):
        return cls(tuple(json.loads(text)))

    @classmethod
    def parse(cls, text, a_min=None, a_max=None):
        """Parse ``"a_min,-6,-4,-2,a_max"``; the literals resolve to data extremes."""
        edges = []
        for tok in text.split(","):
            tok = tok.strip()
            if tok == "a_min":
                if a_min is None:
                    raise DomainError("'a_min' used but no data minimum available")
                edges.append(a_min)
            elif tok == "a_max":
                if a_max is None:
                    raise DomainError("'a_max' used but no data maximum available")
                edges.append(a_max)
            else:
                try:
                    edges.append(float(tok))
                except ValueError:
                    raise DomainError(f"bad bin edge {tok!r}") from None
        return cls(tuple(edges))


@dataclass(frozen=True)
class NormalizedAltitude:
    bin_index: int
    residual: float
    value: float


def _check(a, scheme, clamp):
    if not math.isfinite(a):
        raise DomainError(f"altitude {a} is not finite")
    if a < scheme.lower:
        if clamp:
            return scheme.lower
        raise DomainError(f"altitude {a} below lower bound b_0={scheme.lower}")
    if a > scheme.upper:
        if clamp:
            return scheme.upper
        raise DomainError(f"altitude {a} above upper bound b_K={scheme.upper}")
    return a


def quantize(a, scheme, clamp=False):
    a = _check(a, scheme, clamp)
    # lower-inclusive bins; the top edge is folded into the last bin
    return min(bisect.bisect_right(scheme.edges, a) - 1, scheme.K - 1)


def residual(a, scheme, clamp=False):
    a = _check(a, scheme, clamp)
    i = quantize(a, scheme)
    lo, hi = scheme.interval(i)
    return (a - lo) / (hi - lo)


def normalize(a, scheme, clamp=False):
    a = _check(a, scheme, clamp)
    i = quantize(a, scheme)
    r = residual(a, scheme)
    return NormalizedAltitude(i, r, (i + r) / scheme.K)


def normalize_values(altitudes, scheme, clamp=False):
    """Vectorized :func:`normalize`, returning only the scalar values."""
    a = np.asarray(altitudes, dtype=float)
    if clamp:
        a = np.clip(a, scheme.lower, scheme.upper)
    elif a.size and (a.min() < scheme.lower or a.max() > scheme.upper):
        raise DomainError(f"altitudes outside [{scheme.lower}, {scheme.upper}]")
    edges = np.asarray(scheme.edges)
    i = np.minimum(np.searchsorted(edges, a, side="right") - 1, scheme.K - 1)
    r = (a - edges[i]) / (edges[i + 1] - edges[i])
    return (i + r) / scheme.K


def bin_indices(altitudes, scheme):
    a = np.asarray(altitudes, dtype=float)
    if a.size and (a.min() < scheme.lower or a.max() > scheme.upper):
        raise DomainError(f"altitudes outside [{scheme.lower}, {scheme.upper}]")
    return np.minimum(np.searchsorted(np.asarray(scheme.edges), a, side="right") - 1, scheme.K - 1)


def denormalize(v, scheme):
    if not (0.0 <= v <= 1.0):
        raise DomainError(f"normalized value {v} outside [0, 1]")
    scaled = v * scheme.K
    i = min(int(math.floor(scaled)), scheme.K - 1)
    lo, hi = scheme.interval(i)
    return lo + (scaled - i) * (hi - lo)


def recommended_scheme(a_min, a_max):
    """2-degree bins from -12 to +6 deg, flanked by the data extremes."""
    if not a_min < -12.0:
        raise DomainError(f"a_min={a_min} must lie strictly below -12")
    if not a_max > 6.0:
        raise DomainError(f"a_max={a_max} must lie strictly above 6")
    return BinScheme((a_min, *range(-12, 7, 2), a_max))


def _altitude_of(sample):
    alt = getattr(sample, "altitude_deg", sample)
    if alt is None:
        raise ContractError("sample has no altitude; label it first")
    return float(alt)


def resample_balanced(samples, scheme, target_per_bin=None, seed=0):
    """Indices giving exactly ``target_per_bin`` draws per bin, with replacement.

    ``samples`` may be :class:`GeoSample` records or plain altitudes. The
    default target is the largest bin count. Every bin must be occupied.
    """
    alts = np.array([_altitude_of(s) for s in samples], dtype=float)
    idx = bin_indices(alts, scheme) if alts.size else np.zeros(0, dtype=int)
    members = [np.flatnonzero(idx == k) for k in range(scheme.K)]
    for k, m in enumerate(members):
        if m.size == 0:
            lo, hi = scheme.interval(k)
            raise DomainError(f"bin {k} [{lo:g}, {hi:g}) is empty; the binning is too fine for the data")
    if target_per_bin is None:
        target_per_bin = max(m.size for m in members)
    if target_per_bin < 1:
        raise ContractError("target_per_bin must be >= 1")
    rng = np.random.default_rng(seed)
    picks = np.concatenate([rng.choice(m, size=target_per_bin, replace=True) for m in members])
    return picks[rng.permutation(picks.size)]
