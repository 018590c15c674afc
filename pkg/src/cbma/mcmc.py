"""Adaptive random-walk Metropolis and Laplace evidence for linear-Gaussian
models whose noise sd carries a half-normal prior.

The sampler works on the unconstrained vector (coefficients, log sigma); the
log-Jacobian of the log transform is part of the target density. With known
noise the parameter vector is the coefficients alone.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import NumericError
from .linear import LOG_2PI, HalfNormalNoise, ModelSpec, PosteriorDraws

BURN_IN = 5000
THIN = 5
TARGET_ACCEPT = 0.35
MODE_MAX_ITER = 200
MODE_GRAD_TOL = 1e-8
ACCEPT_WARN_RANGE = (0.05, 0.8)


class LinearGaussianTarget:
    """Unnormalized log posterior with analytic gradient and Hessian.

    Sufficient statistics are cached so each evaluation is O(p^2) whatever n.
    """

    def __init__(self, X, y, spec: ModelSpec):
        self.n, self.p = X.shape
        self.m, self.v = spec.prior_arrays(self.p)
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.half_normal = isinstance(spec.noise, HalfNormalNoise)
        if self.half_normal:
            self.scale = spec.noise.scale
            self.dim = self.p + 1
        else:
            self.sigma = spec.noise.sd
            self.dim = self.p
        self._prior_const = -0.5 * (self.p * LOG_2PI + np.sum(np.log(self.v)))

    def _split(self, theta):
        if self.half_normal:
            return theta[:-1], theta[-1]
        return theta, np.log(self.sigma)

    def _rss(self, beta):
        return self.yty - 2.0 * beta @ self.Xty + beta @ self.XtX @ beta

    def log_density(self, theta) -> float:
        beta, s = self._split(theta)
        s2 = np.exp(2.0 * s)
        rss = max(self._rss(beta), 0.0)
        out = -0.5 * self.n * LOG_2PI - self.n * s - 0.5 * rss / s2
        d = beta - self.m
        out += self._prior_const - 0.5 * np.sum(d * d / self.v)
        if self.half_normal:
            # half-normal density of sigma plus the log-Jacobian s
            out += np.log(2.0) - 0.5 * LOG_2PI - np.log(self.scale) - 0.5 * s2 / self.scale ** 2 + s
        return float(out)

    def gradient(self, theta):
        beta, s = self._split(theta)
        s2 = np.exp(2.0 * s)
        gb = (self.Xty - self.XtX @ beta) / s2 - (beta - self.m) / self.v
        if not self.half_normal:
            return gb
        gs = -self.n + self._rss(beta) / s2 - s2 / self.scale ** 2 + 1.0
        return np.append(gb, gs)

    def hessian(self, theta):
        beta, s = self._split(theta)
        s2 = np.exp(2.0 * s)
        hbb = -self.XtX / s2 - np.diag(1.0 / self.v)
        if not self.half_normal:
            return hbb
        H = np.empty((self.dim, self.dim))
        H[:-1, :-1] = hbb
        H[:-1, -1] = H[-1, :-1] = -2.0 * (self.Xty - self.XtX @ beta) / s2
        H[-1, -1] = -2.0 * self._rss(beta) / s2 - 2.0 * s2 / self.scale ** 2
        return H

    def initial_point(self):
        beta = linalg.solve(self.XtX + np.diag(1.0 / self.v), self.Xty + self.m / self.v, assume_a="pos")
        if not self.half_normal:
            return beta
        rss = max(self._rss(beta), 1e-12 * max(self.yty, 1.0))
        return np.append(beta, 0.5 * np.log(rss / max(self.n, 1)))


def find_mode(target: LinearGaussianTarget, max_iter: int = MODE_MAX_ITER, tol: float = MODE_GRAD_TOL):
    """Newton-preconditioned gradient ascent with backtracking line search.

    Returns (mode, hessian at mode, converged flag).
    """
    theta = target.initial_point()
    f = target.log_density(theta)
    converged = False
    for _ in range(max_iter):
        g = target.gradient(theta)
        if np.linalg.norm(g) < tol:
            converged = True
            break
        H = target.hessian(theta)
        try:
            step = linalg.solve(-H, g, assume_a="pos")
        except linalg.LinAlgError:
            step = g
        slope = g @ step
        if slope <= 0:
            step, slope = g, g @ g
        t = 1.0
        for _ in range(60):
            cand = theta + t * step
            fc = target.log_density(cand)
            if np.isfinite(fc) and fc >= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no ascent possible at floating-point resolution
            converged = np.linalg.norm(g) < 1e-6 * (1.0 + abs(f))
            break
        theta, f = cand, fc
    else:
        converged = np.linalg.norm(target.gradient(theta)) < tol
    return theta, target.hessian(theta), converged


def laplace_log_evidence(target: LinearGaussianTarget, mode, hessian) -> float:
    try:
        L = linalg.cholesky(-hessian, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericError("Hessian at the posterior mode is not negative definite") from exc
    return float(target.log_density(mode) + 0.5 * target.dim * LOG_2PI - np.sum(np.log(np.diag(L))))


def mh_accept(log_current: float, log_proposal: float, log_u: float) -> bool:
    """Metropolis rule; a proposal with higher density always passes because log_u < 0."""
    return log_u < log_proposal - log_current


def metropolis_laplace(X, y, spec: ModelSpec, T: int, rng, burn_in: int = BURN_IN, thin: int = THIN,
                       target_accept: float = TARGET_ACCEPT) -> PosteriorDraws:
    target = LinearGaussianTarget(np.asarray(X, dtype=float), np.asarray(y, dtype=float), spec)
    mode, H, converged = find_mode(target)
    log_evidence = laplace_log_evidence(target, mode, H)
    warnings = [] if converged else ["posterior mode search did not reach the gradient tolerance"]

    # proposals shaped by the Laplace covariance; only the global scale adapts
    chol = linalg.cholesky(linalg.inv(-H), lower=True)
    D = target.dim
    log_scale = np.log(2.38 / np.sqrt(D))
    theta = mode.copy()
    f = target.log_density(theta)

    z = rng.standard_normal((burn_in, D)) @ chol.T
    log_u = np.log(rng.random(burn_in))
    for i in range(burn_in):
        cand = theta + np.exp(log_scale) * z[i]
        fc = target.log_density(cand)
        a = min(1.0, np.exp(min(fc - f, 0.0)))
        if mh_accept(f, fc, log_u[i]):
            theta, f = cand, fc
        log_scale += (a - target_accept) / (i + 1) ** 0.6

    n_iter = T * thin
    step = np.exp(log_scale)
    z = rng.standard_normal((n_iter, D)) @ chol.T * step
    log_u = np.log(rng.random(n_iter))
    out = np.empty((T, D))
    accepted = 0
    for i in range(n_iter):
        cand = theta + z[i]
        fc = target.log_density(cand)
        if mh_accept(f, fc, log_u[i]):
            theta, f = cand, fc
            accepted += 1
        if (i + 1) % thin == 0:
            out[(i + 1) // thin - 1] = theta
    rate = accepted / n_iter
    lo, hi = ACCEPT_WARN_RANGE
    if not lo <= rate <= hi:
        warnings.append(f"Metropolis acceptance rate {rate:.3f} outside [{lo}, {hi}]")
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite Metropolis draws")
    if target.half_normal:
        coef, sigma = out[:, :-1], np.exp(out[:, -1])
    else:
        coef, sigma = out, np.full(T, target.sigma)
    return PosteriorDraws(coef, sigma, log_evidence, "metropolis+laplace", rate, warnings)
