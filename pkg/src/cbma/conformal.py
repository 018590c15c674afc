"""Full conformal prediction with posterior-predictive conformity scores.

Per-model scores come from add-one-in importance sampling over posterior
draws fitted once on the training data; the model-averaged score mixes them
with weights proportional to posterior model probability times the
candidate's predictive density. Everything runs on log densities.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .bma import ModelPosterior, ModelSpace, model_posterior
from .errors import DegenerateWeightError, GridQualityError, UnsupportedOracleError
from .linear import (
    LOG_2PI,
    Dataset,
    FittedModel,
    PosteriorDraws,
    basis_stats,
    conjugate_posterior,
    expand_basis,
    log_marginal_likelihood_conjugate,
    log_predictive_exact,
)

LOG_WEIGHT_FLOOR = -700.0
MAX_DEGENERATE_FRACTION = 0.10
# products of rescaled weights below this are recomputed term by term
_UNDERFLOW_GUARD = 1e-280


@dataclass(frozen=True)
class LabelGrid:
    values: np.ndarray
    spacing: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("label grid needs at least two points")
        if not self.spacing > 0 or np.max(np.abs(np.diff(v) - self.spacing)) > 1e-12 * max(1.0, np.abs(v).max()):
            raise ValueError("label grid must be uniform and strictly increasing")
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, lo: float, hi: float, G: int) -> "LabelGrid":
        spacing = (hi - lo) / (G - 1)
        return cls(lo + spacing * np.arange(G), spacing)

    @classmethod
    def from_training(cls, y, expand: float = 0.5, G: int = 200) -> "LabelGrid":
        """Span [min - expand*range, max + expand*range] of the training responses."""
        lo, hi = float(np.min(y)), float(np.max(y))
        r = hi - lo if hi > lo else 1.0
        return cls.uniform(lo - expand * r, hi + expand * r, G)

    @classmethod
    def anchored(cls, anchor: float, lo: float, hi: float, G: int) -> "LabelGrid":
        """Uniform grid of roughly G points over [lo, hi] with ``anchor`` exactly on a node."""
        spacing = (hi - lo) / (G - 1)
        k_lo = int(np.floor((lo - anchor) / spacing))
        k_hi = int(np.ceil((hi - anchor) / spacing))
        return cls(anchor + spacing * np.arange(k_lo, k_hi + 1), spacing)

    @property
    def G(self) -> int:
        return self.values.size

    def nearest(self, y: float) -> int:
        """Index of the grid point nearest y, or -1 when y lies off the grid."""
        if y < self.values[0] - 0.5 * self.spacing or y > self.values[-1] + 0.5 * self.spacing:
            return -1
        return int(np.clip(np.rint((y - self.values[0]) / self.spacing), 0, self.G - 1))


@dataclass
class PredictionSet:
    grid: LabelGrid
    included: np.ndarray
    alpha: float
    metadata: dict = field(default_factory=dict)

    def length(self) -> float:
        """Lebesgue measure of the included grid cells (holes are not filled)."""
        return self.grid.spacing * int(np.count_nonzero(self.included))

    @property
    def empty(self) -> bool:
        return not np.any(self.included)

    def hull(self):
        if self.empty:
            return None
        idx = np.flatnonzero(self.included)
        return float(self.grid.values[idx[0]]), float(self.grid.values[idx[-1]])

    def intervals(self):
        """Maximal runs of included grid points as (first value, last value) pairs."""
        runs = []
        idx = np.flatnonzero(self.included)
        if idx.size == 0:
            return runs
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.r_[idx[0], idx[breaks + 1]]
        stops = np.r_[idx[breaks], idx[-1]]
        return [(float(self.grid.values[a]), float(self.grid.values[b])) for a, b in zip(starts, stops)]

    def contains(self, y: float) -> bool:
        g = self.grid.nearest(y)
        return g >= 0 and bool(self.included[g])


def conformal_rank(scores) -> np.ndarray:
    """Fraction of the n+1 scores that are <= the last one (the candidate's).

    Works along the last axis, so a (G, n+1) array gives G ranks.
    """
    s = np.asarray(scores, dtype=float)
    return np.mean(s <= s[..., -1:], axis=-1)


def build_set(ranks, alpha: float, grid: LabelGrid, excluded=None) -> PredictionSet:
    ranks = np.asarray(ranks, dtype=float)
    if ranks.shape != (grid.G,):
        raise ValueError("need exactly one rank per grid point")
    included = ranks > alpha
    if excluded is not None:
        included &= ~np.asarray(excluded, dtype=bool)
    ps = PredictionSet(grid, included, alpha)
    ps.metadata["empty"] = ps.empty
    ps.metadata["hull"] = ps.hull()
    return ps


def log_likelihood_matrix(draws: PosteriorDraws, design, y) -> np.ndarray:
    """log p_theta_t(y_i | x_i) for every draw t (rows) and pair i (columns)."""
    design = np.atleast_2d(design)
    mu = draws.coef @ design.T
    s = draws.sigma[:, None]
    r = (np.asarray(y, dtype=float)[None, :] - mu) / s
    return -0.5 * (LOG_2PI + r * r) - np.log(s)


def _log_weighted_means(log_w, log_p):
    """log( sum_t exp(log_w[t,g] + log_p[t,i]) ) for every (g, i).

    Factorizes the exponentials around their column maxima and multiplies
    matrices; entries that land near underflow are redone with logsumexp.
    """
    mw = log_w.max(axis=0)
    mp = log_p.max(axis=0)
    A = np.exp(log_w - mw)
    B = np.exp(log_p - mp)
    S = A.T @ B
    with np.errstate(divide="ignore"):
        out = np.log(S) + mw[:, None] + mp[None, :]
    bad = np.argwhere(S < _UNDERFLOW_GUARD)
    for g, i in bad:
        out[g, i] = logsumexp(log_w[:, g] + log_p[:, i])
    return out


def aoi_log_scores(loglik_train, log_w):
    """Add-one-in importance-sampled log scores over a batch of candidates.

    ``loglik_train`` is T x n, ``log_w`` is T x G (candidate log-likelihood per
    draw). Returns (G x (n+1) log scores, G log mean raw weights, G degenerate
    flags). Rows flagged degenerate are NaN.
    """
    T = log_w.shape[0]
    degenerate = log_w.max(axis=0) < LOG_WEIGHT_FLOOR
    ok = ~degenerate
    G = log_w.shape[1]
    n = loglik_train.shape[1]
    scores = np.full((G, n + 1), np.nan)
    log_mean_w = np.full(G, -np.inf)
    if np.any(ok):
        lw = log_w[:, ok]
        lse_w = logsumexp(lw, axis=0)
        scores[ok, :n] = _log_weighted_means(lw, loglik_train) - lse_w[:, None]
        scores[ok, n] = logsumexp(2.0 * lw, axis=0) - lse_w
        log_mean_w[ok] = lse_w - np.log(T)
    return scores, log_mean_w, degenerate


def aoi_log_scores_one(draws: PosteriorDraws, design, y_train, test_row, y: float, chunk: int = 100_000):
    """Log scores and log mean raw weight for a single candidate label.

    Draws are consumed in chunks and combined with logaddexp, so very large T
    never materializes the full T x n likelihood matrix.
    """
    n = np.shape(y_train)[0]
    num = np.full(n, -np.inf)
    den = self_term = max_lw = -np.inf
    row = np.atleast_2d(test_row)
    for start in range(0, draws.T, chunk):
        part = PosteriorDraws(draws.coef[start:start + chunk], draws.sigma[start:start + chunk], 0.0, draws.method)
        lw = log_likelihood_matrix(part, row, [y])[:, 0]
        max_lw = max(max_lw, lw.max())
        lp = log_likelihood_matrix(part, design, y_train)
        num = np.logaddexp(num, logsumexp(lw[:, None] + lp, axis=0))
        den = np.logaddexp(den, logsumexp(lw))
        self_term = np.logaddexp(self_term, logsumexp(2.0 * lw))
    if max_lw < LOG_WEIGHT_FLOOR:
        raise DegenerateWeightError(f"all importance weights underflow at candidate y={y!r}", y=y)
    return np.r_[num - den, self_term - den], den - np.log(draws.T)


def aoi_scores_one_model(draws: PosteriorDraws, design, y_train, test_row, y: float) -> np.ndarray:
    """The n+1 importance-sampled scores for one candidate label y."""
    return np.exp(aoi_log_scores_one(draws, design, y_train, test_row, y)[0])


def cbma_log_aggregate(log_scores, log_probs, log_pred):
    """Model-averaged log scores.

    log_scores: (..., K, n+1); log_probs: (K,) log posterior model probabilities;
    log_pred: (..., K) log predictive density of the candidate under each model.
    Returns (log aggregated scores (..., n+1), weights q (..., K)).
    """
    a = np.asarray(log_probs) + np.asarray(log_pred)
    norm = logsumexp(a, axis=-1, keepdims=True)
    if np.any(~np.isfinite(norm)):
        raise DegenerateWeightError("every aggregation numerator is zero")
    log_q = a - norm
    with np.errstate(invalid="ignore"):
        agg = logsumexp(log_q[..., None] + log_scores, axis=-2)
    return agg, np.exp(log_q)


def cbma_aggregate(per_model_scores, posterior, mean_raw_weights):
    """Aggregate K per-model score vectors into one.

    ``per_model_scores`` is K x (n+1); ``mean_raw_weights`` holds each model's
    (1/T) sum_t w_k^(t), i.e. its predictive density at the candidate.
    Returns (aggregated scores, weights q).
    """
    probs = posterior.probs if isinstance(posterior, ModelPosterior) else np.asarray(posterior, dtype=float)
    s = np.asarray(per_model_scores, dtype=float)
    mw = np.asarray(mean_raw_weights, dtype=float)
    with np.errstate(divide="ignore"):
        agg, q = cbma_log_aggregate(np.log(s), np.log(probs), np.log(mw))
    return np.exp(agg), q


def exact_aoi_log_scores(fit: FittedModel, test_row, y_values):
    """Closed-form add-one-in scores for a known-noise conjugate model.

    Returns (G x (n+1) log scores, G log predictive densities given Z_{1:n}).
    """
    if not fit.spec.conjugate:
        raise UnsupportedOracleError("exact scores need a known-noise conjugate model")
    X, x = fit.design, np.asarray(test_row, dtype=float).reshape(-1)
    s2 = fit.spec.noise.sd ** 2
    mean, cov = fit.exact_posterior()
    precision = np.linalg.inv(cov)
    cov1 = np.linalg.inv(precision + np.outer(x, x) / s2)
    c0 = cov1 @ (precision @ mean)
    c1 = cov1 @ x / s2
    Xf = np.vstack([X, x])
    yv = np.asarray(y_values, dtype=float)
    var = s2 + np.einsum("ij,jk,ik->i", Xf, cov1, Xf)
    loc = (Xf @ c0)[None, :] + yv[:, None] * (Xf @ c1)[None, :]
    resp = np.broadcast_to(np.r_[fit.y, 0.0], loc.shape).copy()
    resp[:, -1] = yv
    r = resp - loc
    scores = -0.5 * (LOG_2PI + np.log(var)[None, :] + r * r / var[None, :])
    log_pred = log_predictive_exact(x, yv, mean, cov, fit.spec.noise.sd)
    return scores, log_pred


@dataclass
class ConformityTable:
    y: np.ndarray
    per_model_scores: np.ndarray  # G x (n+1) x K
    agg_weights: np.ndarray  # G x K
    cbma_scores: np.ndarray  # G x (n+1)
    ranks: np.ndarray  # G x (K+1); last column is the aggregated rank
    mean_raw_weights: np.ndarray  # G x K, Monte Carlo (or exact) predictive density
    degenerate: np.ndarray  # G booleans
    model_names: list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "model", "i", "score", "q_k", "rank"])
            G, n1, K = self.per_model_scores.shape
            for g in range(G):
                for k in range(K):
                    for i in range(n1):
                        w.writerow([repr(self.y[g]), self.model_names[k], i + 1,
                                    repr(self.per_model_scores[g, i, k]), repr(self.agg_weights[g, k]),
                                    repr(self.ranks[g, k])])
                for i in range(n1):
                    w.writerow([repr(self.y[g]), "CBMA", i + 1, repr(self.cbma_scores[g, i]), "",
                                repr(self.ranks[g, K])])


@dataclass
class ConformalResult:
    cbma: PredictionSet
    per_model: list
    table: ConformityTable
    posterior: ModelPosterior
    timings: dict


def full_conformal_set(fits: Sequence[FittedModel], test_x, grid: LabelGrid, alpha: float,
                       space: Optional[ModelSpace] = None, exact: bool = False,
                       max_degenerate_fraction: float = MAX_DEGENERATE_FRACTION) -> ConformalResult:
    """Model-averaged and per-model full conformal sets for one test covariate row.

    Posterior draws in ``fits`` were obtained once on Z_{1:n}; candidates are
    handled by reweighting. With ``exact=True`` the closed-form scores of
    conjugate models replace the Monte Carlo estimates.
    """
    K = len(fits)
    weights = space.weights if space is not None else np.array([f.spec.prior_weight for f in fits], float)
    posterior = model_posterior([f.log_evidence for f in fits], weights / weights.sum())
    with np.errstate(divide="ignore"):
        log_probs = np.log(posterior.probs)
    G, n = grid.G, fits[0].y.shape[0]
    log_scores = np.empty((G, K, n + 1))
    log_pred = np.empty((G, K))
    degenerate = np.zeros(G, dtype=bool)
    timings = {}
    for k, fit in enumerate(fits):
        t0 = time.perf_counter()
        row = fit.design_for(np.atleast_2d(test_x))[0]
        if exact:
            log_scores[:, k], log_pred[:, k] = exact_aoi_log_scores(fit, row, grid.values)
        else:
            loglik = log_likelihood_matrix(fit.draws, fit.design, fit.y)
            mu = fit.draws.coef @ row
            s = fit.draws.sigma
            z = (grid.values[None, :] - mu[:, None]) / s[:, None]
            log_w = -0.5 * (LOG_2PI + z * z) - np.log(s)[:, None]
            log_scores[:, k], log_pred[:, k], deg = aoi_log_scores(loglik, log_w)
            degenerate |= deg
        timings[k] = time.perf_counter() - t0

    n_bad = int(degenerate.sum())
    if n_bad > max_degenerate_fraction * G:
        raise GridQualityError(f"{n_bad} of {G} grid points have degenerate importance weights; "
                               "use a narrower or denser grid around the data")
    ok = ~degenerate
    ranks = np.zeros((G, K + 1))
    ranks[ok, :K] = conformal_rank(log_scores[ok])
    t0 = time.perf_counter()
    agg = np.full((G, n + 1), np.nan)
    q = np.full((G, K), np.nan)
    if np.any(ok):
        agg[ok], q[ok] = cbma_log_aggregate(log_scores[ok], log_probs, log_pred[ok])
        ranks[ok, K] = conformal_rank(agg[ok])
    cbma_set = build_set(ranks[:, K], alpha, grid, excluded=degenerate)
    timings["cbma"] = time.perf_counter() - t0

    sets = [build_set(ranks[:, k], alpha, grid, excluded=degenerate) for k in range(K)]
    for s in [cbma_set, *sets]:
        s.metadata["degenerate_points"] = n_bad
    names = space.names if space is not None else [f.spec.name or f"M{k + 1}" for k, f in enumerate(fits)]
    table = ConformityTable(grid.values, np.exp(log_scores).transpose(0, 2, 1), q, np.exp(agg), ranks,
                            np.exp(log_pred), degenerate, names)
    return ConformalResult(cbma_set, sets, table, posterior, timings)


def exact_cbma_score_oracle(train: Dataset, test_x, y: float, space: ModelSpace) -> np.ndarray:
    """Model-averaged scores from the full-data hierarchical posterior.

    Each model is refitted in closed form on all n+1 pairs; the scores are
    sum_k p(M_k | Z_{1:n+1}) p_k(Y_i | X_i, Z_{1:n+1}).
    """
    if not all(m.conjugate for m in space):
        raise UnsupportedOracleError("the exact oracle supports known-noise conjugate models only")
    x_full = np.vstack([train.x, np.atleast_2d(test_x)])
    y_full = np.r_[train.y, y]
    log_ev = np.empty(len(space))
    dens = np.empty((len(space), y_full.size))
    for k, spec in enumerate(space):
        stats = basis_stats(train, spec.basis)
        X = expand_basis(x_full, spec.basis, stats)
        log_ev[k] = log_marginal_likelihood_conjugate(X, y_full, spec)
        mean, cov = conjugate_posterior(X, y_full, spec)
        dens[k] = np.exp(log_predictive_exact(X, y_full, mean, cov, spec.noise.sd))
    post = model_posterior(log_ev, space.weights)
    return post.probs @ dens
