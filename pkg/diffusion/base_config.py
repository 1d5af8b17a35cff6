"""
BaseDmConfig: behaviour shared by every diffusion-model config.

A config is the triplet (denoiser parameterisation, training noise
distribution p(sigma), loss weighting lambda(sigma)). Subclasses supply the
per-kind formulas; this class owns argument validation, the preconditioned
denoiser D = c_skip x + c_out F(c_in x; c_noise) and the weighting relative
to EDM.

Usage Example:
    from diffusion.dm_configs import create_dm_config
    cfg = create_dm_config('edm')
    pre = cfg.precondition(0.5)
    d = cfg.denoise(net, x, 0.5)
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

EDM_SIGMA_DATA = math.sqrt(1.0 / 3.0)


@dataclass(frozen=True)
class Preconditioning:
    """The four scalars (or arrays, for a vector of sigmas) at a given noise level."""
    c_skip: Any
    c_out: Any
    c_in: Any
    c_noise: Any


class BaseDmConfig:
    """
    Base class for the four DM configs. Subclasses set `kind`, `defaults` and
    implement the underscore hooks on validated float64 arrays.
    """
    kind = None
    defaults: Dict[str, float] = {}

    def __init__(self, **parameters):
        """
        Args:
            **parameters: Overrides of the per-kind constants in `defaults`.
        Raises:
            ValueError: On unknown names or constants violating the config invariants.
        """
        unknown = set(parameters) - set(self.defaults)
        if unknown:
            raise ValueError(f"Unknown {self.kind} parameters: {sorted(unknown)}")
        self.parameters = {**self.defaults, **{k: float(v) for k, v in parameters.items()}}
        self.logger = logging.getLogger(self.__class__.__name__)
        self._validate()

    def __getattr__(self, name):
        parameters = self.__dict__.get('parameters', {})
        if name in parameters:
            return parameters[name]
        raise AttributeError(name)

    def __repr__(self):
        args = ', '.join(f"{k}={v:g}" for k, v in self.parameters.items())
        return f"{self.__class__.__name__}({args})"

    def __eq__(self, other):
        return isinstance(other, BaseDmConfig) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.parameters.items()))))

    def to_dict(self):
        return {'kind': self.kind, 'parameters': dict(self.parameters)}

    # hooks
    def _validate(self):
        pass

    def _precondition(self, sigma):
        raise NotImplementedError

    def _loss_weight(self, sigma):
        raise NotImplementedError

    def _sample_sigma(self, rng, size):
        raise NotImplementedError

    def _sigma_density(self, sigma):
        raise NotImplementedError

    def sigma_range(self):
        """Support of the training noise distribution as (low, high)."""
        raise NotImplementedError

    @staticmethod
    def _positive_sigma(sigma):
        arr = np.asarray(sigma, dtype=np.float64)
        if np.any(~(arr > 0)):
            raise ValueError(f"sigma must be positive, got {sigma}")
        return arr

    @staticmethod
    def _unwrap(sigma, value):
        return float(value) if np.ndim(sigma) == 0 else value

    def precondition(self, sigma) -> Preconditioning:
        """
        Evaluate (c_skip, c_out, c_in, c_noise) at sigma.
        Args:
            sigma (float | array): Noise level(s), all > 0.
        Returns:
            Preconditioning: floats for a scalar sigma, arrays otherwise.
        Raises:
            ValueError: If any sigma <= 0.
        """
        arr = self._positive_sigma(sigma)
        c_skip, c_out, c_in, c_noise = (np.broadcast_to(np.asarray(c, dtype=np.float64), arr.shape)
                                        for c in self._precondition(arr))
        return Preconditioning(*(self._unwrap(sigma, c) for c in (c_skip, c_out, c_in, c_noise)))

    def loss_weight(self, sigma):
        """lambda(sigma). Raises ValueError if sigma <= 0."""
        arr = self._positive_sigma(sigma)
        return self._unwrap(sigma, np.broadcast_to(self._loss_weight(arr), arr.shape))

    def sample_training_sigma(self, rng, size=None):
        """
        Draw sigma ~ p(sigma).
        Args:
            rng (numpy.random.Generator): Source of randomness.
            size (int | tuple, optional): Shape of the draw; a float when omitted.
        Returns:
            float or numpy.ndarray
        """
        draw = self._sample_sigma(rng, size)
        return float(draw) if size is None else np.asarray(draw, dtype=np.float64)

    def sigma_density(self, sigma):
        """Density of p(sigma) with respect to sigma, zero outside the support."""
        arr = self._positive_sigma(sigma)
        low, high = self.sigma_range()
        density = np.where((arr >= low) & (arr <= high), self._sigma_density(arr), 0.0)
        return self._unwrap(sigma, density)

    def effective_weight(self, sigma):
        """lambda(sigma) relative to EDM's weighting with sigma_data = sqrt(1/3)."""
        arr = self._positive_sigma(sigma)
        edm = (arr ** 2 + EDM_SIGMA_DATA ** 2) / (arr * EDM_SIGMA_DATA) ** 2
        return self._unwrap(sigma, self._loss_weight(arr) / edm)

    def denoise(self, net, x, sigma, label=None):
        """
        D(x; sigma) = c_skip x + c_out F(c_in x; c_noise, label).
        Args:
            net: Raw network, called as net(c_in * x, c_noise, label).
            x: Points, shape (n, 2) (numpy array or torch tensor).
            sigma (float | array): Noise level, scalar or one per point.
            label: Class labels forwarded to the network (null token for unconditional).
        Returns:
            Denoised points of the same type and shape as x.
        """
        pre = self.precondition(sigma)
        n = x.shape[0]
        cols = [self._column(c, n, x) for c in (pre.c_skip, pre.c_out, pre.c_in)]
        c_noise = np.broadcast_to(np.asarray(pre.c_noise, dtype=np.float64), (n,))
        c_skip, c_out, c_in = cols
        return c_skip * x + c_out * net(c_in * x, c_noise, label)

    @staticmethod
    def _column(c, n, like):
        col = np.broadcast_to(np.asarray(c, dtype=np.float64), (n,)).reshape(n, 1)
        if hasattr(like, 'new_tensor'):
            return like.new_tensor(np.ascontiguousarray(col))
        return col
