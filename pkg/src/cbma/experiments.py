"""Data generators, model spaces and the repeated train/test harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .baselines import (
    MergeRule,
    bayes_credible_set,
    bma_credible_set,
    majority_vote_merge,
    mixture_credible_interval,
)
from .bma import ModelSpace, model_posterior
from .conformal import LabelGrid, full_conformal_set, log_likelihood_matrix
from .errors import CBMAError, DataError, GridTruncationError, InsufficientDataError, SchemaError
from .linear import (
    BasisSpec,
    Dataset,
    HalfNormalNoise,
    KnownNoise,
    LOG_2PI,
    ModelSpec,
    fit_model,
    log_predictive_exact,
)

log = logging.getLogger(__name__)

QUADRATIC_PRIOR_MEAN = (0.0, 1.0, 0.5)
QUADRATIC_PRIOR_SD = 0.5  # coefficient variance 0.25
QUADRATIC_NOISE_SD = 0.2
SYNTHETIC_CSV = "synthetic_housing.csv"


@dataclass(frozen=True)
class GeneratorSpec:
    """Which synthetic (or CSV-backed) data to draw.

    quadratic: x ~ U(0,1), coefficients drawn from their generating priors
    unless ``beta`` is given, Gaussian noise with sd ``noise_sd``.
    hermite: X ~ Weibull(1, 1), Y = theta * logistic(X) + (0.01 + X) * N(0,1).
    csv: ``n`` rows sampled from ``path`` (all rows when n is None), then
    standardized.
    """

    kind: str
    n: Optional[int] = 100
    seed: Optional[int] = None
    noise_sd: float = QUADRATIC_NOISE_SD
    beta: Optional[tuple] = None
    theta: float = 1.0
    path: Optional[str] = None
    response: str = "y"
    covariates: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("quadratic", "hermite", "csv"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.n is not None and self.n < 4:
            raise ValueError("generators need n >= 4")


def quadratic_mean(x, beta):
    return beta[0] + beta[1] * x + beta[2] * x ** 2


def hermite_mean(x, theta):
    return theta * expit(x)


def generate(spec: GeneratorSpec, extra_x=None) -> Dataset:
    """Draw a dataset. ``extra_x`` appends rows at fixed covariate values drawn
    from the same realized generating parameters (used for fixed test points)."""
    rng = np.random.default_rng(spec.seed)
    extra = np.atleast_1d(np.asarray(extra_x, dtype=float)) if extra_x is not None else np.empty(0)
    if spec.kind == "quadratic":
        if spec.beta is None:
            beta = rng.normal(QUADRATIC_PRIOR_MEAN, QUADRATIC_PRIOR_SD)
        else:
            beta = np.asarray(spec.beta, dtype=float)
        x = np.r_[rng.uniform(0.0, 1.0, spec.n), extra]
        y = quadratic_mean(x, beta) + spec.noise_sd * rng.standard_normal(x.size)
        return Dataset(x[:, None], y)
    if spec.kind == "hermite":
        x = np.r_[rng.weibull(1.0, spec.n), extra]
        y = hermite_mean(x, spec.theta) + (0.01 + x) * rng.standard_normal(x.size)
        return Dataset(x[:, None], y)
    data = read_csv(spec.path or default_csv_path(), spec.response, spec.covariates)
    if spec.n is not None and spec.n < data.n:
        data = data.subset(np.sort(rng.choice(data.n, spec.n, replace=False)))
    return data.standardize()


def default_csv_path() -> str:
    return str(resources.files("cbma") / "data" / SYNTHETIC_CSV)


def read_csv(path, response: str, covariates: Optional[Sequence[str]] = None) -> Dataset:
    """Numeric columns from a headed CSV; rows with any non-finite value are dropped."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise SchemaError(f"{path} is empty") from None
            rows = [r for r in reader if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if covariates is None:
        covariates = [h for h in header if h != response]
    missing = [c for c in [response, *covariates] if c not in header]
    if missing:
        raise SchemaError(f"{path} lacks columns {missing}; has {header}")
    cols = [header.index(c) for c in covariates] + [header.index(response)]

    def num(v):
        try:
            return float(v)
        except ValueError:
            return math.nan

    table = np.array([[num(r[j]) if j < len(r) else math.nan for j in cols] for r in rows], dtype=float)
    table = table.reshape(-1, len(cols))
    table = table[np.all(np.isfinite(table), axis=1)]
    if table.shape[0] < 4:
        raise InsufficientDataError(f"{path} has {table.shape[0]} usable rows; need at least 4")
    return Dataset(table[:, :-1], table[:, -1])


def make_synthetic_housing(path, rows: int = 2000, seed: int = 20640):
    """Write the bundled stand-in for the housing data: 8 correlated covariates,
    linear signal carried by the first two."""
    rng = np.random.default_rng(seed)
    d = 8
    corr = 0.3 ** np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    x = rng.multivariate_normal(np.zeros(d), corr, size=rows)
    y = 0.7 * x[:, 0] + 0.35 * x[:, 1] + 0.6 * rng.standard_normal(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(d)] + ["y"])
        for xi, yi in zip(x, y):
            w.writerow([f"{v:.6f}" for v in xi] + [f"{yi:.6f}"])


def quadratic_space(noise_sd: float = QUADRATIC_NOISE_SD) -> ModelSpace:
    """True quadratic model, linear model, and intercept-plus-square model,
    all with known noise and the generating coefficient priors."""
    noise = KnownNoise(noise_sd)
    m0, m1, m2 = QUADRATIC_PRIOR_MEAN
    sd = QUADRATIC_PRIOR_SD
    return ModelSpace([
        ModelSpec(BasisSpec.polynomial(powers=(1, 2)), (m0, m1, m2), sd, noise, name="M1"),
        ModelSpec(BasisSpec.polynomial(powers=(1,)), (m0, m1), sd, noise, name="M2"),
        ModelSpec(BasisSpec.polynomial(powers=(2,)), (m0, m2), sd, noise, name="M3"),
    ])


def hermite_space(K: int = 11, prior_sd: float = 5.0, noise_scale: float = 1.0,
                  intercept: bool = False) -> ModelSpace:
    """Nested models: M_k uses the first k Gaussian-weighted power columns."""
    return ModelSpace([ModelSpec(BasisSpec.hermite(k, include_intercept=intercept), 0.0, prior_sd,
                                 HalfNormalNoise(noise_scale), name=f"M{k}") for k in range(1, K + 1)])


def pairs_space(pairs: Sequence[Sequence[int]], prior_sd: float = 5.0, noise_scale: float = 1.0) -> ModelSpace:
    """Intercept plus the listed (0-based) covariate columns, one model per entry."""
    return ModelSpace([ModelSpec(BasisSpec.raw(cols), 0.0, prior_sd, HalfNormalNoise(noise_scale),
                                 name=f"M{k + 1}") for k, cols in enumerate(pairs)])


def consecutive_pairs(K: int = 4):
    return [(k, k + 1) for k in range(K)]


def method_ids(K: int):
    return (["CBMA", "BMA-credible"] + [f"Bayes-M{k + 1}" for k in range(K)]
            + [f"CB-M{k + 1}" for k in range(K)] + ["MajorityVote"])


def _child_seeds(seed: Optional[int], count: int):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


@dataclass(frozen=True)
class RepetitionTask:
    generator: GeneratorSpec
    space: ModelSpace
    alpha: float
    test_fraction: float
    T: int
    grid_expand: float
    grid_points: int
    seed: int
    index: int
    exact: bool = False


def _predictive_components(fit, row):
    """Gaussian components (means, sds, weights) of one model's predictive at ``row``."""
    if fit.spec.conjugate:
        mean, cov = fit.exact_posterior()
        sd = math.sqrt(fit.spec.noise.sd ** 2 + float(row @ cov @ row))
        return np.array([row @ mean]), np.array([sd]), np.array([1.0])
    return fit.draws.coef @ row, fit.draws.sigma, np.full(fit.draws.T, 1.0 / fit.draws.T)


def _predictive_density(fit, row, grid):
    if fit.spec.conjugate:
        mean, cov = fit.exact_posterior()
        return np.exp(log_predictive_exact(row, grid.values, mean, cov, fit.spec.noise.sd))
    mu = fit.draws.coef @ row
    s = fit.draws.sigma
    z = (grid.values[None, :] - mu[:, None]) / s[:, None]
    log_w = -0.5 * (LOG_2PI + z * z) - np.log(s)[:, None]
    return np.exp(logsumexp(log_w, axis=0) - np.log(fit.draws.T))


def _credible(make_grid_set, components, alpha):
    """Grid credible set, or the exact mixture interval when the grid truncates the predictive."""
    try:
        return make_grid_set(), False
    except GridTruncationError:
        return mixture_credible_interval(*components, alpha), True


def run_repetition(task: RepetitionTask) -> dict:
    """One fresh dataset, one split, every method at every test point."""
    rng = np.random.default_rng(task.seed)
    data = generate(replace(task.generator, seed=int(rng.integers(2 ** 63))))
    perm = rng.permutation(data.n)
    n_test = int(round(task.test_fraction * data.n))
    if n_test < 1 or n_test >= data.n:
        raise InsufficientDataError("split leaves an empty train or test set")
    train, test = data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))
    fit_seeds = _child_seeds(int(rng.integers(2 ** 63)), len(task.space))
    fits, warnings = [], []
    for spec, s in zip(task.space, fit_seeds):
        fit = fit_model(train, spec, task.T, s)
        fits.append(fit)
        warnings.extend(f"{spec.name}: {w}" for w in fit.draws.warnings)
    grid = LabelGrid.from_training(train.y, task.grid_expand, task.grid_points)
    K = len(fits)
    methods = method_ids(K)
    cover = {m: [] for m in methods}
    length = {m: [] for m in methods}
    clock = {m: 0.0 for m in methods}
    degenerate = off_grid = 0
    posterior = None
    for j in range(test.n):
        x, y_true = test.x[j], test.y[j]
        res = full_conformal_set(fits, x, grid, task.alpha, task.space, exact=task.exact)
        posterior = res.posterior
        degenerate += res.cbma.metadata["degenerate_points"]
        outcome = {"CBMA": res.cbma}
        clock["CBMA"] += res.timings["cbma"]
        dens, comps = [], []
        for k, fit in enumerate(fits):
            outcome[f"CB-M{k + 1}"] = res.per_model[k]
            clock[f"CB-M{k + 1}"] += res.timings[k]
            t0 = time.perf_counter()
            row = fit.design_for(x[None, :])[0]
            d = _predictive_density(fit, row, grid)
            c = _predictive_components(fit, row)
            outcome[f"Bayes-M{k + 1}"], wide = _credible(lambda: bayes_credible_set(d, task.alpha, grid), c,
                                                          task.alpha)
            clock[f"Bayes-M{k + 1}"] += time.perf_counter() - t0
            off_grid += wide
            dens.append(d)
            comps.append(c)
        t0 = time.perf_counter()
        mix = (np.concatenate([c[0] for c in comps]), np.concatenate([c[1] for c in comps]),
               np.concatenate([p * c[2] for p, c in zip(res.posterior.probs, comps)]))
        outcome["BMA-credible"], wide = _credible(
            lambda: bma_credible_set(res.posterior, np.array(dens), task.alpha, grid), mix, task.alpha)
        clock["BMA-credible"] += time.perf_counter() - t0
        off_grid += wide
        t0 = time.perf_counter()
        outcome["MajorityVote"] = majority_vote_merge(res.per_model, MergeRule.uniform(K))
        clock["MajorityVote"] += time.perf_counter() - t0
        for m, s in outcome.items():
            cover[m].append(s.contains(y_true))
            length[m].append(s.length())
    rows = [{"method": m, "repetition": task.index, "coverage": float(np.mean(cover[m])),
             "mean_length": float(np.mean(length[m])), "time_sec": clock[m]} for m in methods]
    return {"rows": rows, "degenerate_points": degenerate, "off_grid_credible": off_grid, "warnings": warnings,
            "model_probs": posterior.probs.tolist(), "log_evidences": posterior.log_evidences.tolist()}


def _describe(values) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    sd = float(v.std(ddof=1)) if v.size > 1 else math.nan
    return {"mean": float(v.mean()), "se": sd / math.sqrt(v.size), "median": float(med),
            "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1)}


@dataclass
class ExperimentReport:
    methods: list
    rows: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def values(self, method: str, column: str) -> np.ndarray:
        return np.array([r[column] for r in self.rows if r["method"] == method])

    def aggregate(self) -> dict:
        out = {}
        for m in self.methods:
            if not any(r["method"] == m for r in self.rows):
                continue
            out[m] = {c: _describe(self.values(m, c)) for c in ("coverage", "mean_length", "time_sec")}
        return out

    def to_csv(self, path, record_times: bool = False):
        """Per repetition x method rows. Wall times vary between runs, so they are
        written only with ``record_times``; otherwise the column holds ``nan`` and
        the file is reproducible byte for byte."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "repetition", "coverage", "mean_length", "time_sec"])
            for r in self.rows:
                t = repr(r["time_sec"]) if record_times else "nan"
                w.writerow([r["method"], r["repetition"], repr(r["coverage"]), repr(r["mean_length"]), t])

    def summary(self, config: Optional[dict] = None) -> dict:
        return _json_safe({"methods": self.aggregate(), "failed_repetitions": self.failed,
                           "metadata": self.metadata, "config": config or {}})

    def write_summary(self, path, config: Optional[dict] = None):
        with open(path, "w") as fh:
            json.dump(self.summary(config), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _map(fn, tasks, threads: int):
    if threads is None or threads <= 1 or len(tasks) <= 1:
        return [_guarded(fn, t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_guarded, [fn] * len(tasks), tasks))


def _guarded(fn, task):
    try:
        return fn(task)
    except CBMAError as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


def run_experiment(generator: GeneratorSpec, space: ModelSpace, alpha: float, E: int,
                   test_fraction: float = 0.4, T: int = 4000, grid_expand: float = 0.5,
                   grid_points: int = 200, seed: Optional[int] = None, threads: int = 1,
                   exact: bool = False) -> ExperimentReport:
    """E independent repetitions; rows are merged in repetition order."""
    if E < 1:
        raise ValueError("need at least one repetition")
    if not 0 < test_fraction < 1:
        raise ValueError("test fraction must lie in (0, 1)")
    tasks = [RepetitionTask(generator, space, alpha, test_fraction, T, grid_expand, grid_points, s, e, exact)
             for e, s in enumerate(_child_seeds(seed, E))]
    report = ExperimentReport(method_ids(len(space)))
    degenerate, off_grid, warnings, probs = 0, 0, [], []
    for e, out in enumerate(_map(run_repetition, tasks, threads)):
        if "error" in out:
            report.failed.append({"repetition": e, "error": out["error"]})
            log.warning("repetition %d failed: %s", e, out["error"])
            continue
        log.info("repetition %d done", e)
        report.rows.extend(out["rows"])
        degenerate += out["degenerate_points"]
        off_grid += out["off_grid_credible"]
        warnings.extend(out["warnings"])
        probs.append(out["model_probs"])
    report.metadata = {"alpha": alpha, "E": E, "seed": seed, "T": T, "test_fraction": test_fraction,
                       "grid_expand": grid_expand, "grid_points": grid_points, "exact_scores": exact,
                       "generator": asdict(generator), "models": space.names,
                       "degenerate_grid_points": degenerate, "off_grid_credible_sets": off_grid,
                       "sampler_warnings": warnings,
                       "failed_repetitions": len(report.failed), "model_probs": probs}
    if generator.kind == "quadratic":
        report.metadata["noise_parameterization"] = (
            f"noise sd {generator.noise_sd} (variance {generator.noise_sd ** 2:.4g}); "
            "fitted models reuse the generating coefficient priors with known noise")
    return report


@dataclass(frozen=True)
class ConvergenceTask:
    generator: GeneratorSpec
    space: ModelSpace
    true_index: tuple
    test_x: float
    T: int
    grid_expand: float
    grid_points: int
    seed: int


def _q_true(task: ConvergenceTask) -> float:
    rng = np.random.default_rng(task.seed)
    data = generate(replace(task.generator, seed=int(rng.integers(2 ** 63))), extra_x=[task.test_x])
    train, test = data.subset(np.arange(data.n - 1)), data.subset([data.n - 1])
    fits = [fit_model(train, spec, task.T, s) for spec, s in
            zip(task.space, _child_seeds(int(rng.integers(2 ** 63)), len(task.space)))]
    grid = LabelGrid.from_training(train.y, task.grid_expand, task.grid_points)
    g = grid.nearest(test.y[0])
    y = grid.values[g if g >= 0 else int(np.argmin(np.abs(grid.values - test.y[0])))]
    post = model_posterior([f.log_evidence for f in fits], task.space.weights)
    log_pred = np.array([logsumexp(log_likelihood_matrix(f.draws, f.design_for(test.x), [y])[:, 0])
                         - np.log(f.draws.T) for f in fits])
    with np.errstate(divide="ignore"):
        a = np.log(post.probs) + log_pred
    q = np.exp(a - logsumexp(a))
    return float(q[list(task.true_index)].sum())


def convergence_study(generator: GeneratorSpec, space: ModelSpace, n_list: Sequence[int], E: int,
                      true_index=0, test_x: float = 0.5, T: int = 2000, grid_expand: float = 0.5,
                      grid_points: int = 200, seed: Optional[int] = None, threads: int = 1) -> dict:
    """Aggregation weight on the true model(s) at the grid point nearest the
    true test response, for growing training sizes n.

    Give the generator fixed coefficients (``beta``) to study one data
    distribution; otherwise each repetition draws its own truth.
    """
    true_index = tuple(np.atleast_1d(true_index).tolist())
    out = {}
    for n, n_seed in zip(n_list, _child_seeds(seed, len(n_list))):
        tasks = [ConvergenceTask(replace(generator, n=int(n)), space, true_index, test_x, T, grid_expand,
                                 grid_points, s) for s in _child_seeds(n_seed, E)]
        q = np.array([r for r in _map(_q_true, tasks, threads) if not isinstance(r, dict)])
        q1, med, q3 = np.percentile(q, [25, 50, 75])
        out[int(n)] = {"median": float(med), "q1": float(q1), "q3": float(q3), "values": q.tolist(),
                       "failed": E - q.size}
    return out


def synthetic_coverage(space: ModelSpace, generator: GeneratorSpec, alpha: float, R: int,
                       grid_points: int = 200, grid_expand: float = 0.5, seed: Optional[int] = None) -> dict:
    """Coverage of exact-score model-averaged sets with the true response on the grid.

    Each repetition draws n training pairs plus one test pair; the grid is
    shifted so the test response sits exactly on a node.
    """
    covered = []
    per_model = []
    for s in _child_seeds(seed, R):
        rng = np.random.default_rng(s)
        data = generate(replace(generator, seed=int(rng.integers(2 ** 63)), n=generator.n + 1))
        train, test = data.subset(np.arange(generator.n)), data.subset([generator.n])
        fits = [fit_model(train, spec, 1, 0, method="conjugate") for spec in space]
        lo, hi = float(train.y.min()), float(train.y.max())
        r = hi - lo
        grid = LabelGrid.anchored(test.y[0], min(lo - grid_expand * r, test.y[0]),
                                  max(hi + grid_expand * r, test.y[0]), grid_points)
        res = full_conformal_set(fits, test.x[0], grid, alpha, space, exact=True)
        g = grid.nearest(test.y[0])
        covered.append(bool(res.cbma.included[g]))
        per_model.append([bool(p.included[g]) for p in res.per_model])
    return {"coverage": float(np.mean(covered)), "per_model_coverage": np.mean(per_model, axis=0).tolist(),
            "R": R, "n": generator.n, "alpha": alpha}
