"""Comparator sets: central Bayes credible intervals (single model and BMA
mixture) and weighted majority-vote merging of conformal sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import brentq
from scipy.special import ndtr

from .bma import bma_mixture_predictive
from .conformal import LabelGrid, PredictionSet
from .errors import GridMismatchError, GridTruncationError


@dataclass(frozen=True)
class MergeRule:
    weights: tuple
    threshold: float = 0.5

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 1 or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("merge weights must be nonnegative with positive sum")
        if not 0 < self.threshold < 1:
            raise ValueError("merge threshold must lie in (0, 1)")
        object.__setattr__(self, "weights", tuple(w / w.sum()))

    @classmethod
    def uniform(cls, K: int, threshold: float = 0.5) -> "MergeRule":
        return cls(tuple(np.full(K, 1.0 / K)), threshold)


def bayes_credible_set(density, alpha: float, grid: LabelGrid) -> PredictionSet:
    """Equal-tailed interval from a predictive density tabulated on the grid.

    The CDF is accumulated with the trapezoid rule and renormalized by the
    mass the grid captures; that mass must be at least 1 - alpha.
    """
    density = np.asarray(density, dtype=float)
    if density.shape != (grid.G,) or np.any(density < 0) or not np.all(np.isfinite(density)):
        raise ValueError("density must be finite, nonnegative and tabulated on the grid")
    cdf = cumulative_trapezoid(density, grid.values, initial=0.0)
    mass = cdf[-1]
    if not mass >= 1.0 - alpha:
        raise GridTruncationError(f"grid holds predictive mass {mass:.4f} < 1 - alpha; widen the grid")
    cdf = cdf / mass
    lo, hi = np.interp([alpha / 2.0, 1.0 - alpha / 2.0], cdf, grid.values)
    included = (grid.values >= lo) & (grid.values <= hi)
    return PredictionSet(grid, included, alpha, {"interval": (float(lo), float(hi)), "grid_mass": float(mass)})


def bma_credible_set(posterior, densities, alpha: float, grid: LabelGrid) -> PredictionSet:
    """Central credible set of the posterior-probability mixture of K predictives (K x G)."""
    return bayes_credible_set(bma_mixture_predictive(posterior, densities), alpha, grid)


@dataclass
class CredibleInterval:
    """Equal-tailed interval not tied to a label grid."""

    lo: float
    hi: float
    alpha: float
    metadata: dict

    def length(self) -> float:
        return self.hi - self.lo

    def contains(self, y: float) -> bool:
        return self.lo <= y <= self.hi


def mixture_credible_interval(means, sds, weights, alpha: float, xtol: float = 1e-10) -> CredibleInterval:
    """Central interval of a finite Gaussian mixture by root-finding on its CDF.

    Used when a predictive is too diffuse for the label grid to hold 1 - alpha
    of its mass.
    """
    means, sds, weights = (np.asarray(a, dtype=float).ravel() for a in (means, sds, weights))
    if not (means.shape == sds.shape == weights.shape) or np.any(sds <= 0) or np.any(weights < 0):
        raise ValueError("need matching component means, positive sds and nonnegative weights")
    weights = weights / weights.sum()

    def cdf(y):
        return float(weights @ ndtr((y - means) / sds))

    lo_b, hi_b = float(np.min(means - 40 * sds)), float(np.max(means + 40 * sds))
    lo, hi = (brentq(lambda y: cdf(y) - p, lo_b, hi_b, xtol=xtol) for p in (alpha / 2.0, 1.0 - alpha / 2.0))
    return CredibleInterval(lo, hi, alpha, {"interval": (lo, hi), "off_grid": True})


def majority_vote_merge(sets: Sequence[PredictionSet], rule: Optional[MergeRule] = None) -> PredictionSet:
    """Keep a label when the weighted share of sets containing it exceeds the threshold.

    Level-alpha inputs that may be dependent give a merged set with coverage
    at least 1 - 2*alpha; that bound is recorded in the metadata.
    """
    if not sets:
        raise ValueError("nothing to merge")
    grid = sets[0].grid
    for s in sets[1:]:
        if s.grid.spacing != grid.spacing or not np.array_equal(s.grid.values, grid.values):
            raise GridMismatchError("majority vote needs all sets on one grid")
    rule = rule or MergeRule.uniform(len(sets))
    if len(rule.weights) != len(sets):
        raise ValueError("one merge weight per set is required")
    votes = np.asarray(rule.weights) @ np.array([s.included for s in sets], dtype=float)
    alpha = max(s.alpha for s in sets)
    return PredictionSet(grid, votes > rule.threshold, alpha,
                         {"coverage_guarantee": max(0.0, 1.0 - 2.0 * alpha), "threshold": rule.threshold})
