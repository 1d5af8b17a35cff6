"""
Closed-form nine-mode 2D Gaussian mixture: data sampling, σ-perturbed density,
score, Bayes-optimal denoiser and the h-vicinity coverage metric.

All functions accept a single point (shape (2,)) or a batch (shape (n, 2)) and
return results of the matching shape.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from utils import rng_util

logger = logging.getLogger("GmmOracle")

NUM_MODES = 9
NULL_TOKEN = NUM_MODES


def _default_means():
    a = 1.0 / math.sqrt(2.0)
    return (
        (-a, 0.0), (-a / 2, a / 2), (0.0, a),
        (-a / 2, -a / 2), (0.0, 0.0), (a / 2, a / 2),
        (0.0, -a), (a / 2, -a / 2), (a, 0.0),
    )


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture with a shared component standard deviation."""
    means: tuple = field(default_factory=_default_means)
    component_std: float = 1.0 / 25.0
    weights: Optional[tuple] = None

    def __post_init__(self):
        means = tuple(tuple(float(c) for c in m) for m in self.means)
        if not means or any(len(m) != 2 for m in means):
            raise ValueError("means must be a non-empty list of 2-vectors")
        object.__setattr__(self, 'means', means)
        weights = self.weights
        if weights is None:
            weights = tuple(1.0 / len(means) for _ in means)
        weights = tuple(float(w) for w in weights)
        if len(weights) != len(means):
            raise ValueError(f"{len(weights)} weights for {len(means)} means")
        if any(w <= 0 for w in weights):
            raise ValueError("mixture weights must be positive")
        if abs(math.fsum(weights) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {math.fsum(weights)}, expected 1")
        object.__setattr__(self, 'weights', weights)
        if not self.component_std > 0:
            raise ValueError("component_std must be positive")

    @classmethod
    def default(cls):
        return cls()

    @classmethod
    def single(cls, mean=(0.0, 0.0), std=1.0):
        """One-component spec; its perturbed family stays Gaussian."""
        return cls(means=(tuple(mean),), component_std=std, weights=(1.0,))

    def to_dict(self):
        return {'means': [list(m) for m in self.means], 'component_std': self.component_std,
                'weights': list(self.weights)}

    @classmethod
    def from_dict(cls, data):
        return cls(means=tuple(tuple(m) for m in data['means']), component_std=float(data['component_std']),
                   weights=tuple(data['weights']))

    @property
    def num_components(self):
        return len(self.means)

    @property
    def null_token(self):
        return self.num_components

    def mean_array(self):
        return np.asarray(self.means, dtype=np.float64)

    def weight_array(self):
        return np.asarray(self.weights, dtype=np.float64)

    def min_separation(self):
        """Smallest distance between two modes, in units of component_std."""
        mu = self.mean_array()
        if len(mu) < 2:
            return math.inf
        d = np.linalg.norm(mu[:, None, :] - mu[None, :, :], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        return float(d.min() / self.component_std)


class Point2(NamedTuple):
    x: float
    y: float


class LabeledSample(NamedTuple):
    point: Point2
    label: int


@dataclass(frozen=True)
class LabeledSamples:
    """Column storage for a list of LabeledSample: points (n, 2) and labels (n,)."""
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(points) != len(labels):
            raise ValueError(f"{len(points)} points but {len(labels)} labels")
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'labels', labels)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        p = self.points[i]
        return LabeledSample(Point2(float(p[0]), float(p[1])), int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledSamples(self.points[indices], self.labels[indices])

    @classmethod
    def from_list(cls, samples: Sequence[LabeledSample]):
        if not samples:
            return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
        return cls([tuple(s.point) for s in samples], [s.label for s in samples])


def sample_data(spec: GmmSpec, n: int, rng) -> LabeledSamples:
    """
    Draw n labelled points: component k ~ weights, point ~ N(mu_k, std^2 I).
    Args:
        spec (GmmSpec): Mixture.
        n (int): Number of samples, n >= 0.
        rng (int | numpy.random.Generator): Seed or generator.
    Returns:
        LabeledSamples
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if not isinstance(rng, np.random.Generator):
        rng = rng_util.stream(rng, rng_util.DATA)
    labels = rng.choice(spec.num_components, size=n, p=spec.weight_array())
    points = spec.mean_array()[labels] + spec.component_std * rng.standard_normal((n, 2))
    return LabeledSamples(points, labels)


def sample_perturbed(spec: GmmSpec, sigma: float, n: int, rng) -> np.ndarray:
    """Draw n points from p(x; sigma), the data convolved with N(0, sigma^2 I)."""
    data = sample_data(spec, n, rng)
    if not isinstance(rng, np.random.Generator):
        rng = rng_util.stream(rng, rng_util.DATA, 1)
    return data.points + sigma * rng.standard_normal((n, 2))


def _component_log_terms(spec, x, sigma):
    """log w_k + log N(x; mu_k, (std^2 + sigma^2) I), shape (n, K), and the variance."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    var = spec.component_std ** 2 + float(sigma) ** 2
    diff = x[:, None, :] - spec.mean_array()[None, :, :]
    sq = np.sum(diff ** 2, axis=-1)
    log_terms = np.log(spec.weight_array())[None, :] - math.log(2 * math.pi * var) - sq / (2 * var)
    return log_terms, diff, var


def _match_shape(x, result):
    return result[0] if np.ndim(x) == 1 else result


def log_perturbed_density(spec: GmmSpec, x, sigma: float):
    log_terms, _, _ = _component_log_terms(spec, x, sigma)
    return _match_shape(x, logsumexp(log_terms, axis=1))


def perturbed_density(spec: GmmSpec, x, sigma: float):
    """
    p(x; sigma) = sum_k w_k N(x; mu_k, (std^2 + sigma^2) I).
    Far from every mode the value underflows towards zero; that is a valid output.
    """
    return np.exp(log_perturbed_density(spec, x, sigma))


def responsibilities(spec: GmmSpec, x, sigma: float):
    """Posterior component probabilities given a noisy observation, shape (n, K)."""
    log_terms, _, _ = _component_log_terms(spec, x, sigma)
    return _match_shape(x, softmax(log_terms, axis=1))


def analytic_score(spec: GmmSpec, x, sigma: float):
    """grad_x log p(x; sigma) = sum_k r_k(x) (mu_k - x) / (std^2 + sigma^2)."""
    log_terms, diff, var = _component_log_terms(spec, x, sigma)
    resp = softmax(log_terms, axis=1)
    score = -np.einsum('nk,nkd->nd', resp, diff) / var
    return _match_shape(x, score)


def ideal_denoiser(spec: GmmSpec, x, sigma: float):
    """Posterior mean E[x0 | x]: x + sigma^2 * score."""
    x_arr = np.asarray(x, dtype=np.float64)
    return x_arr + float(sigma) ** 2 * analytic_score(spec, x_arr, sigma)


def h_vicinity(spec: GmmSpec, samples, h: float) -> float:
    """
    Fraction of samples strictly within h * std of some mode.
    Args:
        spec (GmmSpec): Mixture defining the modes.
        samples: Points, shape (n, 2) (or LabeledSamples).
        h (float): Radius in units of component_std.
    Returns:
        float in [0, 1].
    Raises:
        ValueError: If samples is empty.
    """
    if isinstance(samples, LabeledSamples):
        samples = samples.points
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("h_vicinity of an empty sample list is undefined")
    if h <= 0:
        raise ValueError("h must be positive")
    d = np.linalg.norm(pts[:, None, :] - spec.mean_array()[None, :, :], axis=-1)
    inside = np.any(d < h * spec.component_std, axis=1)
    return float(np.mean(inside))


def expected_vicinity(h: float) -> float:
    """P(|z| < h) for an isotropic 2D standard normal."""
    return 1.0 - math.exp(-h * h / 2.0)


class OracleDenoiser:
    """
    Callable D*(x, sigma) over the analytic mixture, usable wherever a trained
    denoiser is expected.
    """
    stochastic = False

    def __init__(self, spec: GmmSpec = None):
        self.spec = spec or GmmSpec.default()

    def __call__(self, x, sigma):
        return ideal_denoiser(self.spec, x, sigma)

    def __repr__(self):
        return f"OracleDenoiser(components={self.spec.num_components}, std={self.spec.component_std})"
