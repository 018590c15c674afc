"""Posterior model probabilities and the BMA mixture predictive."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateEvidenceError
from .linear import ModelSpec

PROB_FLOOR = 1e-300


class ModelSpace:
    """An ordered collection of K candidate models with normalized prior weights."""

    def __init__(self, models: Sequence[ModelSpec]):
        self.models = list(models)
        if not self.models:
            raise ValueError("model space needs at least one model")
        w = np.array([m.prior_weight for m in self.models], dtype=float)
        self.weights = w / w.sum()

    def __len__(self):
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    def __getitem__(self, k):
        return self.models[k]

    @property
    def names(self):
        return [m.name or f"M{k + 1}" for k, m in enumerate(self.models)]


@dataclass(frozen=True)
class ModelPosterior:
    probs: np.ndarray
    log_evidences: np.ndarray


def model_posterior(log_evidences, prior_weights) -> ModelPosterior:
    le = np.asarray(log_evidences, dtype=float)
    lw = np.log(np.asarray(prior_weights, dtype=float))
    if le.shape != lw.shape or le.size < 1:
        raise ValueError("need one log evidence per prior weight")
    if np.any(np.isnan(le)) or np.any(le == np.inf):
        raise DegenerateEvidenceError("log evidences must be finite or -inf")
    if np.all(le == -np.inf):
        raise DegenerateEvidenceError("every model has zero marginal likelihood")
    a = le + lw
    probs = np.exp(a - logsumexp(a))
    probs[probs < PROB_FLOOR] = 0.0
    return ModelPosterior(probs / probs.sum(), le)


def bma_mixture_predictive(posterior, densities):
    """Posterior-probability mixture of per-model predictive densities.

    ``densities`` has the model index first; trailing axes (e.g. a label grid)
    are carried through.
    """
    probs = posterior.probs if isinstance(posterior, ModelPosterior) else np.asarray(posterior, dtype=float)
    return np.tensordot(probs, np.asarray(densities, dtype=float), axes=(0, 0))
