"""Bayesian linear regression: basis expansion, conjugate posterior and evidence,
posterior sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg

from .errors import DataError, DegenerateBasisError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Dataset:
    """n covariate rows ``x`` (n x d) paired with n responses ``y``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DataError(f"x has shape {x.shape} but y has {y.shape[0]} entries")
        if y.shape[0] < 1:
            raise DataError("dataset must contain at least one row")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def standardize(self) -> "Dataset":
        """Centre and scale every covariate column and the response (ddof=1)."""
        if self.n < 2:
            raise DataError("standardization needs at least two rows")
        sx = self.x.std(axis=0, ddof=1)
        sy = self.y.std(ddof=1)
        if np.any(sx == 0) or sy == 0:
            bad = [j for j in range(self.d) if sx[j] == 0]
            raise DataError(f"cannot standardize constant columns {bad}" if bad else "response is constant")
        return Dataset((self.x - self.x.mean(axis=0)) / sx, (self.y - self.y.mean()) / sy)


@dataclass(frozen=True)
class BasisSpec:
    """How raw covariates become design columns.

    ``kind`` is ``"raw"`` (selected columns), ``"polynomial"`` (powers of one
    covariate) or ``"hermite"`` (Gaussian-weighted powers of one centred
    covariate, ``order`` columns plus an intercept only when requested).
    """

    kind: str
    columns: tuple = ()
    powers: tuple = ()
    order: int = 0
    column: int = 0
    include_intercept: bool = True

    @classmethod
    def raw(cls, columns: Sequence[int], include_intercept: bool = True) -> "BasisSpec":
        return cls("raw", columns=tuple(int(c) for c in columns), include_intercept=include_intercept)

    @classmethod
    def polynomial(cls, degree: Optional[int] = None, powers: Optional[Sequence[int]] = None,
                   column: int = 0, include_intercept: bool = True) -> "BasisSpec":
        if powers is None:
            if degree is None or degree < 1:
                raise ValueError("polynomial basis needs degree >= 1 or explicit powers")
            powers = range(1, degree + 1)
        powers = tuple(int(q) for q in powers)
        if any(q < 1 for q in powers):
            raise ValueError("polynomial powers must be >= 1; use include_intercept for the constant")
        return cls("polynomial", powers=powers, column=column, include_intercept=include_intercept)

    @classmethod
    def hermite(cls, order: int, column: int = 0, include_intercept: bool = False) -> "BasisSpec":
        if order < 1:
            raise ValueError("hermite basis needs order >= 1")
        return cls("hermite", order=int(order), column=column, include_intercept=include_intercept)

    @property
    def n_columns(self) -> int:
        if self.kind == "hermite":
            body = self.order
        else:
            body = len(self.columns) if self.kind == "raw" else len(self.powers)
        return body + int(self.include_intercept)


def basis_stats(x, basis: BasisSpec):
    """Centre/scale frozen from training covariates (hermite only, else None)."""
    if basis.kind != "hermite":
        return None
    col = _as_matrix(x)[:, basis.column]
    if col.shape[0] < 2:
        raise DegenerateBasisError("hermite basis needs at least two training rows")
    scale = float(col.std(ddof=1))
    if not scale > 0:
        raise DegenerateBasisError("hermite basis on a constant covariate (s_X = 0)")
    return float(col.mean()), scale


def expand_basis(x, basis: BasisSpec, frozen_stats=None) -> np.ndarray:
    """Design matrix for ``x`` (a Dataset or an n x d array).

    For the hermite basis, ``frozen_stats=(center, scale)`` must be passed at
    test time so that no test covariates leak into the expansion.
    """
    x = _as_matrix(x)
    n = x.shape[0]
    if basis.kind == "raw":
        if any(c < 0 or c >= x.shape[1] for c in basis.columns):
            raise DataError(f"basis columns {basis.columns} out of range for d={x.shape[1]}")
        body = x[:, list(basis.columns)]
    elif basis.kind in ("polynomial", "hermite"):
        if not 0 <= basis.column < x.shape[1]:
            raise DataError(f"basis column {basis.column} out of range for d={x.shape[1]}")
        u = x[:, basis.column]
        if basis.kind == "polynomial":
            body = np.column_stack([u ** q for q in basis.powers]) if basis.powers else np.empty((n, 0))
        else:
            center, scale = frozen_stats if frozen_stats is not None else basis_stats(x, basis)
            if not scale > 0:
                raise DegenerateBasisError("hermite basis on a constant covariate (s_X = 0)")
            c = u - center
            bump = np.exp(-(c ** 2) / (2.0 * scale ** 2))
            body = np.column_stack([c ** j * bump for j in range(basis.order)])
    else:
        raise ValueError(f"unknown basis kind {basis.kind!r}")
    if basis.include_intercept:
        body = np.column_stack([np.ones(n), body])
    if body.shape[1] < 1:
        raise DataError("basis expands to zero columns")
    return body


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, Dataset):
        return x.x
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


@dataclass(frozen=True)
class KnownNoise:
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("noise sd must be positive")


@dataclass(frozen=True)
class HalfNormalNoise:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("half-normal scale must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """One candidate model: basis, independent Gaussian coefficient prior,
    noise model and prior model weight (normalized later by ModelSpace)."""

    basis: BasisSpec
    prior_mean: Union[float, tuple] = 0.0
    prior_sd: Union[float, tuple] = 1.0
    noise: Union[KnownNoise, HalfNormalNoise] = KnownNoise(1.0)
    prior_weight: float = 1.0
    name: str = ""

    def __post_init__(self):
        for attr in ("prior_mean", "prior_sd"):
            v = getattr(self, attr)
            if not np.isscalar(v):
                object.__setattr__(self, attr, tuple(float(t) for t in v))
        if np.any(np.asarray(self.prior_sd, dtype=float) <= 0):
            raise ValueError("coefficient prior standard deviations must be positive")
        if not self.prior_weight > 0:
            raise ValueError("prior model weight must be positive")

    @property
    def conjugate(self) -> bool:
        return isinstance(self.noise, KnownNoise)

    def prior_arrays(self, p: int):
        """Prior mean and variance vectors broadcast to p coefficients."""
        m = np.broadcast_to(np.asarray(self.prior_mean, dtype=float), (p,)).copy()
        sd = np.asarray(self.prior_sd, dtype=float)
        if m.shape != (p,) or sd.size not in (1, p):
            raise DataError(f"prior length does not match {p} design columns")
        return m, np.broadcast_to(sd, (p,)) ** 2


@dataclass
class PosteriorDraws:
    """T posterior draws plus the log marginal likelihood of the training data."""

    coef: np.ndarray
    sigma: np.ndarray
    log_marginal_likelihood: float
    method: str
    acceptance_rate: Optional[float] = None
    warnings: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.coef.shape[0]


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite input to conjugate computation")


def conjugate_posterior(design, y, spec: ModelSpec):
    """Posterior mean and covariance of the coefficients under known noise sd."""
    X = np.asarray(design, dtype=float).reshape(-1, np.shape(design)[-1])
    y = np.asarray(y, dtype=float).reshape(-1)
    _check_finite(X, y)
    m, v = spec.prior_arrays(X.shape[1])
    s2 = spec.noise.sd ** 2
    precision = X.T @ X / s2 + np.diag(1.0 / v)
    try:
        chol = linalg.cho_factor(precision, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericError("posterior precision is not positive definite") from exc
    cov = linalg.cho_solve(chol, np.eye(X.shape[1]))
    cov = 0.5 * (cov + cov.T)
    mean = linalg.cho_solve(chol, X.T @ y / s2 + m / v)
    return mean, cov


def log_marginal_likelihood_conjugate(design, y, spec: ModelSpec) -> float:
    """log N(y; X m, s^2 I + X V X^T) via the p x p determinant lemma."""
    X = np.asarray(design, dtype=float).reshape(-1, np.shape(design)[-1])
    y = np.asarray(y, dtype=float).reshape(-1)
    _check_finite(X, y)
    n = y.shape[0]
    if n == 0:
        return 0.0
    m, v = spec.prior_arrays(X.shape[1])
    s2 = spec.noise.sd ** 2
    if not s2 > 0:
        raise NumericError("noise variance must be positive")
    r = y - X @ m
    precision = X.T @ X / s2 + np.diag(1.0 / v)
    try:
        L = linalg.cholesky(precision, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericError("marginal covariance is singular") from exc
    b = linalg.solve_triangular(L, X.T @ r / s2, lower=True)
    quad = r @ r / s2 - b @ b
    logdet = n * np.log(s2) + np.sum(np.log(v)) + 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (n * LOG_2PI + logdet + quad))


def log_predictive_exact(x_row, y_value, mean, cov, sigma):
    """Log of the Gaussian posterior predictive N(y; x^T mu, sigma^2 + x^T S x).

    Broadcasts over ``y_value``; ``x_row`` may also be a matrix of rows, in
    which case ``y_value`` must broadcast against the row count.
    """
    x = np.asarray(x_row, dtype=float)
    loc = x @ mean
    var = sigma ** 2 + np.einsum("...i,ij,...j->...", x, cov, x)
    r = np.asarray(y_value, dtype=float) - loc
    return -0.5 * (LOG_2PI + np.log(var) + r * r / var)


def posterior_predictive_density_exact(x_row, y_value, mean, cov, sigma):
    return np.exp(log_predictive_exact(x_row, y_value, mean, cov, sigma))


def sample_posterior(design, y, spec: ModelSpec, T: int, seed=None, method: Optional[str] = None,
                     **mcmc_options) -> PosteriorDraws:
    """Draw T posterior samples.

    Known-sd models default to exact i.i.d. draws from the Gaussian posterior;
    ``method="metropolis"`` forces the adaptive random-walk path (with a
    Laplace evidence), which is the only route for half-normal noise.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if method is None:
        method = "conjugate" if spec.conjugate else "metropolis"
    if method == "conjugate":
        if not spec.conjugate:
            raise ValueError("conjugate sampling requires known noise sd")
        mean, cov = conjugate_posterior(X, y, spec)
        L = np.linalg.cholesky(cov)
        coef = mean + rng.standard_normal((T, mean.shape[0])) @ L.T
        return PosteriorDraws(coef, np.full(T, spec.noise.sd), log_marginal_likelihood_conjugate(X, y, spec),
                              "conjugate-exact")
    if method == "metropolis":
        from .mcmc import metropolis_laplace

        return metropolis_laplace(X, y, spec, T, rng, **mcmc_options)
    raise ValueError(f"unknown sampling method {method!r}")


@dataclass
class FittedModel:
    """A model fitted once on the training data: frozen basis statistics,
    training design, and posterior draws."""

    spec: ModelSpec
    stats: Optional[tuple]
    design: np.ndarray
    y: np.ndarray
    draws: PosteriorDraws

    def design_for(self, x) -> np.ndarray:
        return expand_basis(x, self.spec.basis, self.stats)

    @property
    def log_evidence(self) -> float:
        return self.draws.log_marginal_likelihood

    def exact_posterior(self):
        return conjugate_posterior(self.design, self.y, self.spec)


def fit_model(train: Dataset, spec: ModelSpec, T: int, seed=None, method: Optional[str] = None) -> FittedModel:
    stats = basis_stats(train, spec.basis)
    design = expand_basis(train, spec.basis, stats)
    draws = sample_posterior(design, train.y, spec, T, seed, method)
    return FittedModel(spec, stats, design, train.y, draws)
