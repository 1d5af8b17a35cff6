"""
The four DM configs: VP, VE, v-prediction (VPred) and EDM.

Constants follow the training-range-adjusted table: VE uses [0.002, 80] and
VPred uses eps_min/eps_max built from e^-13 and e^9, so every config learns
the denoiser over the sampler range.
"""
import math

import numpy as np
from scipy.stats import norm

from diffusion.base_config import BaseDmConfig, EDM_SIGMA_DATA


class VpConfig(BaseDmConfig):
    """Variance preserving: sigma(t) = sqrt(exp(beta_d t^2 / 2 + beta_min t) - 1)."""
    kind = 'vp'
    defaults = {'beta_d': 19.9, 'beta_min': 0.1, 'eps_t': 1e-5, 'm_disc': 1000.0}

    def _validate(self):
        if not (self.beta_d > 0 and self.beta_min >= 0):
            raise ValueError("VP requires beta_d > 0 and beta_min >= 0")
        if not 0 < self.eps_t < 1:
            raise ValueError("VP requires 0 < eps_t < 1")
        if self.m_disc < 2:
            raise ValueError("VP requires m_disc >= 2")

    def sigma_of_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.sqrt(np.expm1(0.5 * self.beta_d * t ** 2 + self.beta_min * t))

    def t_of_sigma(self, sigma):
        """Closed-form root of beta_d t^2 / 2 + beta_min t = ln(1 + sigma^2)."""
        log_term = np.log1p(np.asarray(sigma, dtype=np.float64) ** 2)
        return (np.sqrt(self.beta_min ** 2 + 2 * self.beta_d * log_term) - self.beta_min) / self.beta_d

    def sigma_range(self):
        return float(self.sigma_of_t(self.eps_t)), float(self.sigma_of_t(1.0))

    def _precondition(self, sigma):
        return (np.ones_like(sigma), -sigma, 1.0 / np.sqrt(sigma ** 2 + 1.0),
                (self.m_disc - 1.0) * self.t_of_sigma(sigma))

    def _loss_weight(self, sigma):
        return 1.0 / sigma ** 2

    def _sample_sigma(self, rng, size):
        return self.sigma_of_t(rng.uniform(self.eps_t, 1.0, size=size))

    def _sigma_density(self, sigma):
        dt_dsigma = (2 * sigma / (1 + sigma ** 2)) / np.sqrt(self.beta_min ** 2 + 2 * self.beta_d * np.log1p(sigma ** 2))
        return dt_dsigma / (1.0 - self.eps_t)


class VeConfig(BaseDmConfig):
    """Variance exploding: ln(sigma) uniform on [ln sigma_min, ln sigma_max]."""
    kind = 've'
    defaults = {'sigma_min': 0.002, 'sigma_max': 80.0}

    def _validate(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("VE requires 0 < sigma_min < sigma_max")

    def sigma_range(self):
        return self.sigma_min, self.sigma_max

    def _precondition(self, sigma):
        return np.ones_like(sigma), sigma, np.ones_like(sigma), np.log(0.5 * sigma)

    def _loss_weight(self, sigma):
        return 1.0 / sigma ** 2

    def _sample_sigma(self, rng, size):
        return np.exp(rng.uniform(math.log(self.sigma_min), math.log(self.sigma_max), size=size))

    def _sigma_density(self, sigma):
        return 1.0 / (sigma * (math.log(self.sigma_max) - math.log(self.sigma_min)))


def _vpred_eps(log_snr_inverse):
    return (2 / math.pi) * math.acos(1 / math.sqrt(1 + math.exp(log_snr_inverse)))


class VPredConfig(BaseDmConfig):
    """v-prediction: sigma(t) = sqrt(cos(pi t / 2)^-2 - 1) = tan(pi t / 2)."""
    kind = 'vpred'
    defaults = {'eps_min': _vpred_eps(-13.0), 'eps_max': _vpred_eps(9.0)}

    def _validate(self):
        if not 0 < self.eps_min < self.eps_max < 1:
            raise ValueError("VPred requires 0 < eps_min < eps_max < 1")

    # tan/arctan forms of sqrt(cos^-2 - 1) and arccos(1/sqrt(1 + sigma^2)); no cancellation near t = 0
    def sigma_of_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.tan(0.5 * math.pi * t)

    def t_of_sigma(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        return (2 / math.pi) * np.arctan(sigma)

    def sigma_range(self):
        return float(self.sigma_of_t(self.eps_min)), float(self.sigma_of_t(self.eps_max))

    def _precondition(self, sigma):
        root = np.sqrt(sigma ** 2 + 1.0)
        return 1.0 / (sigma ** 2 + 1.0), sigma / root, 1.0 / root, self.t_of_sigma(sigma)

    def _loss_weight(self, sigma):
        return (sigma ** 2 + 1.0) / sigma ** 2

    def _sample_sigma(self, rng, size):
        return self.sigma_of_t(rng.uniform(self.eps_min, self.eps_max, size=size))

    def _sigma_density(self, sigma):
        return (2 / math.pi) / (1 + sigma ** 2) / (self.eps_max - self.eps_min)


class EdmConfig(BaseDmConfig):
    """EDM: ln(sigma) ~ N(P_mean, P_std^2), sigma_data fixed rather than estimated."""
    kind = 'edm'
    defaults = {'p_mean': -1.2, 'p_std': 1.2, 'sigma_data': EDM_SIGMA_DATA}

    def _validate(self):
        if not self.p_std > 0:
            raise ValueError("EDM requires p_std > 0")
        if not self.sigma_data > 0:
            raise ValueError("EDM requires sigma_data > 0")

    def sigma_range(self):
        return 0.0, math.inf

    def _precondition(self, sigma):
        sd2 = self.sigma_data ** 2
        total = sigma ** 2 + sd2
        return sd2 / total, sigma * self.sigma_data / np.sqrt(total), 1.0 / np.sqrt(total), 0.25 * np.log(sigma)

    def _loss_weight(self, sigma):
        return (sigma ** 2 + self.sigma_data ** 2) / (sigma * self.sigma_data) ** 2

    def _sample_sigma(self, rng, size):
        return np.exp(rng.normal(self.p_mean, self.p_std, size=size))

    def _sigma_density(self, sigma):
        return norm.pdf(np.log(sigma), loc=self.p_mean, scale=self.p_std) / sigma


DM_CONFIGS = {cls.kind: cls for cls in (VpConfig, VeConfig, VPredConfig, EdmConfig)}


def create_dm_config(kind, **parameters):
    """
    Build a config by name.
    Args:
        kind (str): One of 'vp', 've', 'vpred', 'edm' (case-insensitive).
        **parameters: Constant overrides.
    Returns:
        BaseDmConfig
    Raises:
        ValueError: Unknown kind or invalid constants.
    """
    key = str(kind).lower()
    if key not in DM_CONFIGS:
        raise ValueError(f"Unknown DM config '{kind}', expected one of {sorted(DM_CONFIGS)}")
    return DM_CONFIGS[key](**parameters)


def config_from_dict(data):
    """Inverse of BaseDmConfig.to_dict()."""
    return create_dm_config(data['kind'], **data.get('parameters', {}))
