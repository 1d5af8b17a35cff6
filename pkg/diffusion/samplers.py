"""
Generation-time solvers over any denoiser callable D(x, sigma) -> x_hat on
numpy arrays of shape (n, 2): the rho-spaced schedule, deterministic and
stochastic DDIM, the Churn sampler with Heun correction, and classifier-free
guidance mixing.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from utils import rng_util

logger = logging.getLogger("Samplers")

SQRT2_MINUS_1 = math.sqrt(2.0) - 1.0


@dataclass(frozen=True)
class ScheduleSpec:
    steps_M: int = 50
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    def __post_init__(self):
        if self.steps_M < 2:
            raise ValueError("schedule needs at least 2 steps")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("schedule needs 0 < sigma_min < sigma_max")
        if not self.rho > 0:
            raise ValueError("rho must be positive")


@dataclass(frozen=True)
class ChurnSpec:
    s_churn: float = 0.0
    s_min: float = 0.0
    s_max: float = math.inf
    s_noise: float = 1.0

    def __post_init__(self):
        if self.s_churn < 0 or self.s_min < 0:
            raise ValueError("s_churn and s_min must be non-negative")
        if self.s_max < self.s_min:
            raise ValueError("s_max must be >= s_min")
        if not self.s_noise > 0:
            raise ValueError("s_noise must be positive")


@dataclass(frozen=True)
class GuidanceSpec:
    scale_w: float = 1.0
    label: Optional[int] = None


def schedule(spec: ScheduleSpec) -> np.ndarray:
    """sigma_i = (smax^(1/rho) + i/(M-1) (smin^(1/rho) - smax^(1/rho)))^rho, endpoints exact."""
    M = spec.steps_M
    inv = 1.0 / spec.rho
    i = np.arange(M, dtype=np.float64)
    hi, lo = spec.sigma_max ** inv, spec.sigma_min ** inv
    sigmas = (hi + i / (M - 1) * (lo - hi)) ** spec.rho
    sigmas[0], sigmas[-1] = spec.sigma_max, spec.sigma_min
    return sigmas


def score_from_denoiser(D, x, sigma):
    """s = (D(x; sigma) - x) / sigma^2."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=np.float64)
    return (D(x, sigma) - x) / sigma ** 2


class GuidedDenoiser:
    """D^w = (1 - w) D_uncond + w D_cond; w in {0, 1} returns the single branch untouched."""
    stochastic = False

    def __init__(self, d_cond, d_uncond, spec: GuidanceSpec):
        self.d_cond = d_cond
        self.d_uncond = d_uncond
        self.spec = spec

    def __call__(self, x, sigma):
        w = self.spec.scale_w
        if w == 1:
            return self.d_cond(x, sigma)
        if w == 0:
            return self.d_uncond(x, sigma)
        return (1.0 - w) * self.d_uncond(x, sigma) + w * self.d_cond(x, sigma)


def guided_denoiser(d_cond, d_uncond, spec: GuidanceSpec):
    return GuidedDenoiser(d_cond, d_uncond, spec)


def _initial(sigma0, n, rng):
    if n < 1:
        raise ValueError("need at least one particle")
    return sigma0 * rng.standard_normal((n, 2))


def ddim_step(D, x, s, s_next, stochastic=False, rng=None):
    """One DDIM move from level s to s_next; the deterministic branch never touches rng."""
    d = D(x, s)
    if stochastic:
        z = rng.standard_normal(x.shape)
        return x + 2 * (s_next - s) / s * (x - d) + math.sqrt(2 * (s - s_next) * s) * z
    return x + (s_next - s) / s * (x - d)


def ddim_integrate(D, sigmas, x0, stochastic=False, rng=None):
    """Run the DDIM loop from x0 at sigmas[0]; returns D(x_{M-1}, sigma_{M-1})."""
    x = np.array(x0, dtype=np.float64)
    for n in range(len(sigmas) - 1):
        x = ddim_step(D, x, sigmas[n], sigmas[n + 1], stochastic, rng)
    return D(x, sigmas[-1])


def ddim_sample(D, spec: ScheduleSpec, stochastic: bool, n: int, rng) -> np.ndarray:
    """
    DDIM sampler.
    Args:
        D: Denoiser callable.
        spec (ScheduleSpec): Schedule.
        stochastic (bool): Stochastic (eta = 1) or deterministic update.
        n (int): Number of particles, >= 1.
        rng (int | numpy.random.Generator): Seed for x_0 and, if stochastic, the path noise.
    Returns:
        numpy.ndarray: (n, 2) samples.
    """
    rng = rng_util.as_generator(rng)
    sigmas = schedule(spec)
    x0 = _initial(sigmas[0], n, rng)
    return ddim_integrate(D, sigmas, x0, stochastic, rng)


class DeterministicDdimMap:
    """The end-to-end map x_0 -> sample of deterministic DDIM, for Jacobian measurements."""
    stochastic = False

    def __init__(self, D, spec: ScheduleSpec):
        self.D = D
        self.spec = spec
        self.sigmas = schedule(spec)

    def __call__(self, x0):
        return ddim_integrate(self.D, self.sigmas, x0, stochastic=False)


def churn_gammas(sigmas, churn: ChurnSpec) -> np.ndarray:
    """gamma_i = min(S_churn / M, sqrt(2) - 1) for sigma_i in [S_min, S_max], else 0."""
    M = len(sigmas)
    gamma = min(churn.s_churn / M, SQRT2_MINUS_1)
    inside = (sigmas >= churn.s_min) & (sigmas <= churn.s_max)
    return np.where(inside, gamma, 0.0)


def churn_inflate(x, s, gamma, s_noise, rng):
    """Raise the noise level of x from s to (1 + gamma) s; returns (x_hat, s_hat)."""
    s_hat = (1.0 + gamma) * s
    if gamma <= 0:
        return x, s_hat
    z = rng.standard_normal(x.shape) * s_noise
    return x + math.sqrt(s_hat ** 2 - s ** 2) * z, s_hat


def churn_sample(D, spec: ScheduleSpec, churn: ChurnSpec, n: int, rng, x0=None) -> np.ndarray:
    """
    Churn sampler with second-order (Heun) correction and terminal level sigma_M = 0.
    Args:
        D: Denoiser callable.
        spec (ScheduleSpec): Schedule.
        churn (ChurnSpec): S_churn, S_min, S_max, S_noise.
        n (int): Number of particles, >= 1.
        rng (int | numpy.random.Generator): Seed.
        x0 (numpy.ndarray, optional): Starting particles instead of N(0, sigma_0^2 I) draws.
    Returns:
        numpy.ndarray: (n, 2) samples.
    """
    rng = rng_util.as_generator(rng)
    sigmas = schedule(spec)
    gammas = churn_gammas(sigmas, churn)
    levels = np.append(sigmas, 0.0)
    x = _initial(sigmas[0], n, rng) if x0 is None else np.array(x0, dtype=np.float64)
    clamp_logged = False
    for i in range(len(sigmas)):
        s, s_next = levels[i], levels[i + 1]
        x_hat, s_hat = churn_inflate(x, s, gammas[i], churn.s_noise, rng)
        s_eval = s_hat
        if s_hat > spec.sigma_max:
            s_eval = spec.sigma_max
            if not clamp_logged:
                logger.warning(f"Churn-inflated sigma {s_hat:.4g} clamped to sigma_max={spec.sigma_max} for evaluation")
                clamp_logged = True
        f = (x_hat - D(x_hat, s_eval)) / s_hat
        x = x_hat + (s_next - s_hat) * f
        if s_next != 0:
            f_next = (x - D(x, s_next)) / s_next
            x = x_hat + 0.5 * (s_next - s_hat) * (f + f_next)
    return x


SAMPLERS = ('ddim-det', 'ddim-stoch', 'churn')
# schedule length M when none is given
DEFAULT_STEPS = {'ddim-det': 50, 'ddim-stoch': 1000, 'churn': 1000}


def default_schedule(kind) -> ScheduleSpec:
    if kind not in DEFAULT_STEPS:
        raise ValueError(f"Unknown sampler '{kind}', expected one of {SAMPLERS}")
    return ScheduleSpec(DEFAULT_STEPS[kind])


def run_sampler(kind, D, spec: ScheduleSpec, n: int, rng, churn: Optional[ChurnSpec] = None):
    """Dispatch by CLI name: 'ddim-det', 'ddim-stoch' or 'churn'."""
    if kind == 'ddim-det':
        return ddim_sample(D, spec, False, n, rng)
    if kind == 'ddim-stoch':
        return ddim_sample(D, spec, True, n, rng)
    if kind == 'churn':
        return churn_sample(D, spec, churn or ChurnSpec(), n, rng)
    raise ValueError(f"Unknown sampler '{kind}', expected one of {SAMPLERS}")
