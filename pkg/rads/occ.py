"""One-class classification core.

The model only ever sees "positive" (normal) instances. It fits a Gaussian
reference density to them, widens it and draws an equal number of artificial
negatives from it. A per-dimension Gaussian class-probability estimator is
then trained on positives vs negatives. Scores combine the estimator's odds
with the reference density through Bayes' rule:

    P(X|C) = ((1 - P(C)) / P(C)) * (P(C|X) / (1 - P(C|X))) * P(X|A)

so a point is positive when its estimated target density beats the reference
density at a 0.5 threshold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Sequence

import numpy as np
from scipy import special, stats

from rads.errors import ConfigError, DataFormatError, InsufficientDataError
from rads.wtsa import EntropyScope, FeatureBounds, FeatureMode, TrainingMatrix

logger = logging.getLogger(__name__)

EPSILON = 1e-6
PROBABILITY_CLAMP = 1e-9
REFERENCE_SPREAD = 50.0
DEFAULT_THRESHOLD = 0.5
PROB_THRESHOLD = "prob_threshold"


class OccLabel(StrEnum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


def as_matrix(points) -> np.ndarray:
    """Coerce a list of vectors (or of scalars, for 1-D features) to an (n, d) array."""
    data = np.asarray(points, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2:
        raise DataFormatError(f"expected a list of feature vectors, got shape {data.shape}")
    return data


def _as_point(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class GaussianDensity:
    """Multivariate normal density P(X|A) over the feature space."""

    mean: np.ndarray
    covariance: np.ndarray
    _frozen: object = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if covariance.shape != (len(mean), len(mean)):
            raise DataFormatError(f"covariance shape {covariance.shape} does not match mean of length {len(mean)}")
        if np.any(np.diag(covariance) < EPSILON):
            raise DataFormatError(f"covariance diagonal below the {EPSILON} floor")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", covariance)
        object.__setattr__(self, "_frozen", stats.multivariate_normal(mean=mean, cov=covariance))

    @property
    def dimension(self) -> int:
        return len(self.mean)

    def logpdf(self, x) -> float | np.ndarray:
        """Log-density of one point, or of each row of an (n, d) array."""
        data = np.asarray(x, dtype=float)
        if data.ndim <= 1:
            return float(self._frozen.logpdf(_as_point(data)))
        return np.atleast_1d(self._frozen.logpdf(data))

    def widened(self, spread: float) -> GaussianDensity:
        """Same mean, standard deviations scaled by spread."""
        return GaussianDensity(self.mean, self.covariance * spread**2)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> GaussianDensity:
        return cls(np.asarray(data["mean"]), np.asarray(data["covariance"]))


@dataclass(frozen=True, eq=False)
class DiagonalGaussian:
    """One weighted component with independent per-dimension normals."""

    weight: float
    mean: np.ndarray
    variance: np.ndarray

    def log_likelihood(self, data: np.ndarray) -> np.ndarray:
        per_dimension = stats.norm.logpdf(data, loc=self.mean, scale=np.sqrt(self.variance))
        return math.log(self.weight) + per_dimension.sum(axis=1)

    def to_dict(self) -> dict:
        return {"weight": self.weight, "mean": self.mean.tolist(), "variance": self.variance.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> DiagonalGaussian:
        return cls(float(data["weight"]), np.asarray(data["mean"], dtype=float), np.asarray(data["variance"], dtype=float))


def _fit_component(data: np.ndarray, weight: float) -> DiagonalGaussian:
    variance = data.var(axis=0, ddof=1) if len(data) > 1 else np.zeros(data.shape[1])
    return DiagonalGaussian(weight, data.mean(axis=0), np.maximum(variance, EPSILON))


def _class_log_likelihood(components: Sequence[DiagonalGaussian], data: np.ndarray) -> np.ndarray:
    return special.logsumexp(np.vstack([c.log_likelihood(data) for c in components]), axis=0)


@dataclass(frozen=True, eq=False)
class ClassProbabilityEstimator:
    """Naive-Bayes style P(target | x).

    The target class is a mixture of per-dimension Gaussians (real windows
    and, when present, the spike instances); the artificial class is a
    single per-dimension Gaussian.
    """

    target: tuple[DiagonalGaussian, ...]
    artificial: tuple[DiagonalGaussian, ...]
    target_prior: float

    def __post_init__(self) -> None:
        if not 0.0 < self.target_prior < 1.0:
            raise DataFormatError(f"target prior must lie in (0, 1), got {self.target_prior}")

    @property
    def dimension(self) -> int:
        return len(self.target[0].mean)

    def log_odds(self, points) -> np.ndarray:
        data = as_matrix(points) if np.ndim(points) > 1 else _as_point(points)[None, :]
        return (
            math.log(self.target_prior)
            + _class_log_likelihood(self.target, data)
            - math.log(1.0 - self.target_prior)
            - _class_log_likelihood(self.artificial, data)
        )

    def target_probability(self, x) -> float | np.ndarray:
        """P(target | x), clamped into [1e-9, 1 - 1e-9]."""
        probability = np.clip(special.expit(self.log_odds(x)), PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
        return float(probability[0]) if np.ndim(x) <= 1 else probability

    def to_dict(self) -> dict:
        return {
            "target": [c.to_dict() for c in self.target],
            "artificial": [c.to_dict() for c in self.artificial],
            "target_prior": self.target_prior,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ClassProbabilityEstimator:
        return cls(
            tuple(DiagonalGaussian.from_dict(c) for c in data["target"]),
            tuple(DiagonalGaussian.from_dict(c) for c in data["artificial"]),
            float(data["target_prior"]),
        )


@dataclass(frozen=True, eq=False)
class OccModel:
    reference: GaussianDensity
    estimator: ClassProbabilityEstimator
    target_prior: float = 0.5
    decision_rule: str = PROB_THRESHOLD
    threshold: float = DEFAULT_THRESHOLD
    mode: FeatureMode | None = None
    bounds: FeatureBounds | None = None
    entropy_scope: EntropyScope = EntropyScope.WINDOW
    rng_seed: int = 0
    reference_spread: float = REFERENCE_SPREAD

    def __post_init__(self) -> None:
        if not 0.0 < self.target_prior < 1.0:
            raise ConfigError(f"target prior must lie in (0, 1), got {self.target_prior}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.decision_rule != PROB_THRESHOLD:
            raise ConfigError(f"unsupported decision rule {self.decision_rule!r}")

    @property
    def dimension(self) -> int:
        return self.reference.dimension

    def check_point(self, x) -> np.ndarray:
        point = _as_point(x)
        if point.shape != (self.dimension,):
            raise DataFormatError(f"model expects {self.dimension}-D points, got shape {point.shape}")
        return point

    def to_dict(self) -> dict:
        return {
            "reference": self.reference.to_dict(),
            "estimator": self.estimator.to_dict(),
            "target_prior": self.target_prior,
            "decision_rule": self.decision_rule,
            "threshold": self.threshold,
            "mode": self.mode.value if self.mode else None,
            "bounds": self.bounds.to_dict() if self.bounds else None,
            "entropy_scope": self.entropy_scope.value,
            "rng_seed": self.rng_seed,
            "reference_spread": self.reference_spread,
        }

    @classmethod
    def from_dict(cls, data: dict) -> OccModel:
        return cls(
            reference=GaussianDensity.from_dict(data["reference"]),
            estimator=ClassProbabilityEstimator.from_dict(data["estimator"]),
            target_prior=float(data["target_prior"]),
            decision_rule=data["decision_rule"],
            threshold=float(data["threshold"]),
            mode=FeatureMode(data["mode"]) if data.get("mode") else None,
            bounds=FeatureBounds.from_dict(data["bounds"]) if data.get("bounds") else None,
            entropy_scope=EntropyScope(data.get("entropy_scope", EntropyScope.WINDOW)),
            rng_seed=int(data["rng_seed"]),
            reference_spread=float(data["reference_spread"]),
        )


def fit_reference(positives) -> GaussianDensity:
    """Sample mean and covariance of the positives, eps added to the diagonal.

    Raises:
        InsufficientDataError: With fewer than 2 instances.
    """
    data = as_matrix(positives)
    if len(data) < 2:
        raise InsufficientDataError(f"reference density needs at least 2 instances, got {len(data)}")
    covariance = np.atleast_2d(np.cov(data, rowvar=False, ddof=1)) + EPSILON * np.eye(data.shape[1])
    return GaussianDensity(data.mean(axis=0), covariance)


def sample_artificial(density: GaussianDensity, n: int, seed: int) -> np.ndarray:
    """n seeded draws from the density as an (n, d) array."""
    if n < 1:
        raise ConfigError(f"artificial sample size must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    return rng.multivariate_normal(density.mean, density.covariance, size=n)


def fit_class_probability(positives, negatives, *, spike_positives=None) -> ClassProbabilityEstimator:
    """Per-dimension Gaussian estimator of P(target | x).

    Args:
        positives: Real target instances.
        negatives: Artificial instances drawn from the reference density.
        spike_positives: Optional artificial spike instances; they join the
            target class as a separate mixture component.

    Raises:
        InsufficientDataError: If either class is empty.
    """
    targets = as_matrix(positives)
    others = as_matrix(negatives)
    if len(targets) == 0 or len(others) == 0:
        raise InsufficientDataError("both classes need at least one instance")
    spikes = as_matrix(spike_positives) if spike_positives is not None and len(spike_positives) else None

    target_total = len(targets) + (len(spikes) if spikes is not None else 0)
    components = [_fit_component(targets, len(targets) / target_total)]
    if spikes is not None:
        components.append(_fit_component(spikes, len(spikes) / target_total))
    return ClassProbabilityEstimator(
        target=tuple(components),
        artificial=(_fit_component(others, 1.0),),
        target_prior=target_total / (target_total + len(others)),
    )


def combine_log_density(target_probability: float, target_prior: float, reference_log_density: float) -> float:
    """log P(X|C) from P(C|X), P(C) and log P(X|A)."""
    return (
        math.log((1.0 - target_prior) / target_prior)
        + math.log(target_probability / (1.0 - target_probability))
        + reference_log_density
    )


def occ_log_score(model: OccModel, x) -> float:
    point = model.check_point(x)
    return combine_log_density(
        model.estimator.target_probability(point),
        model.target_prior,
        model.reference.logpdf(point),
    )


def occ_score(model: OccModel, x) -> float:
    """Estimated target density P(X|C) at x (computed in log space)."""
    return math.exp(occ_log_score(model, x))


def occ_classify(model: OccModel, x) -> OccLabel:
    point = model.check_point(x)
    if model.estimator.target_probability(point) >= model.threshold:
        return OccLabel.POSITIVE
    return OccLabel.NEGATIVE


def fit_occ(
    positives,
    *,
    spike_positives=None,
    seed: int = 0,
    reference_spread: float = REFERENCE_SPREAD,
    threshold: float = DEFAULT_THRESHOLD,
    mode: FeatureMode | None = None,
    bounds: FeatureBounds | None = None,
    entropy_scope: EntropyScope = EntropyScope.WINDOW,
) -> OccModel:
    """Train a one-class model directly from feature arrays."""
    if reference_spread < 1.0:
        raise ConfigError(f"reference spread must be at least 1, got {reference_spread}")
    targets = as_matrix(positives)
    spikes = (
        as_matrix(spike_positives)
        if spike_positives is not None and len(spike_positives)
        else np.empty((0, targets.shape[1]))
    )
    everything = np.vstack([targets, spikes])

    reference = fit_reference(everything).widened(reference_spread)
    negatives = sample_artificial(reference, len(everything), seed)
    estimator = fit_class_probability(targets, negatives, spike_positives=spikes if len(spikes) else None)
    logger.debug(
        f"trained one-class model: {len(targets)} real + {len(spikes)} spike positives, "
        f"{len(negatives)} artificial negatives, seed {seed}"
    )
    return OccModel(
        reference=reference,
        estimator=estimator,
        target_prior=estimator.target_prior,
        threshold=threshold,
        mode=mode,
        bounds=bounds,
        entropy_scope=entropy_scope,
        rng_seed=seed,
        reference_spread=reference_spread,
    )


def train_occ(
    matrix: TrainingMatrix,
    seed: int = 0,
    *,
    reference_spread: float = REFERENCE_SPREAD,
    threshold: float = DEFAULT_THRESHOLD,
) -> OccModel:
    """Train the one-class model for a training matrix (P(C) = 0.5 by the 1:1 draw)."""
    return fit_occ(
        matrix.real,
        spike_positives=matrix.artificial if matrix.artificial_count else None,
        seed=seed,
        reference_spread=reference_spread,
        threshold=threshold,
        mode=matrix.mode,
        bounds=matrix.bounds,
        entropy_scope=matrix.entropy_scope,
    )
