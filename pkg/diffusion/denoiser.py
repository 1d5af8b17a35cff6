"""
The raw network F_theta, its flat parameter vector, per-sample loss gradients
and the EMA shadow.

The network is a small residual MLP on 2D points. Its input is the
concatenation of c_in * x, Fourier features of c_noise and a learned class
embedding (the extra last row is the null token used for unconditional
denoising). Parameters are held as one flat float64 vector; the module
instance is only a template for torch.func.functional_call.
"""
import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call, grad_and_value, jacrev, vmap

from utils import rng_util

DTYPE = torch.float64
logger = logging.getLogger("Denoiser")


@dataclass(frozen=True)
class ArchitectureSpec:
    depth: int = 4
    hidden_width: int = 128
    embedding_dim: int = 16
    fourier_frequencies: int = 16
    num_classes: int = 9

    def __post_init__(self):
        for name in ('depth', 'hidden_width', 'embedding_dim', 'fourier_frequencies', 'num_classes'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def null_token(self):
        return self.num_classes

    def to_dict(self):
        return asdict(self)


class RawNetwork(nn.Module):
    """F_theta(x_in; c_noise, label) -> R^2."""

    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        self.arch = arch
        # geometric frequencies 1 .. 1e-4 cover both t in [0, 1] and (M-1) t up to 999
        freqs = torch.pow(1e-4, torch.arange(arch.fourier_frequencies, dtype=DTYPE) / arch.fourier_frequencies)
        self.register_buffer('frequencies', freqs)
        self.class_embedding = nn.Embedding(arch.num_classes + 1, arch.embedding_dim, dtype=DTYPE)
        in_dim = 2 + 2 * arch.fourier_frequencies + arch.embedding_dim
        self.input_layer = nn.Linear(in_dim, arch.hidden_width, dtype=DTYPE)
        self.blocks = nn.ModuleList(
            [nn.Linear(arch.hidden_width, arch.hidden_width, dtype=DTYPE) for _ in range(arch.depth)])
        self.output_layer = nn.Linear(arch.hidden_width, 2, dtype=DTYPE)

    def forward(self, x_in, c_noise, labels):
        angles = c_noise[..., None] * self.frequencies
        h = torch.cat([x_in, torch.cos(angles), torch.sin(angles), self.class_embedding(labels)], dim=-1)
        h = F.silu(self.input_layer(h))
        for block in self.blocks:
            h = h + block(F.silu(h))
        return self.output_layer(F.silu(h))


@lru_cache(maxsize=16)
def template(arch: ArchitectureSpec) -> RawNetwork:
    return RawNetwork(arch)


@lru_cache(maxsize=16)
def _layout(arch: ArchitectureSpec):
    return tuple((name, tuple(p.shape)) for name, p in template(arch).named_parameters())


def parameter_count(arch: ArchitectureSpec) -> int:
    return sum(math.prod(shape) for _, shape in _layout(arch))


def unflatten(arch: ArchitectureSpec, theta):
    """Split a flat vector into named views matching the template's parameters."""
    expected = parameter_count(arch)
    if theta.ndim != 1 or theta.shape[0] != expected:
        raise ValueError(f"Parameter vector of shape {tuple(theta.shape)} does not match "
                         f"architecture {arch} ({expected} parameters)")
    out, offset = {}, 0
    for name, shape in _layout(arch):
        size = math.prod(shape)
        out[name] = theta[offset:offset + size].view(shape)
        offset += size
    return out


@dataclass
class DenoiserParams:
    """Flat parameter vector theta plus the architecture it belongs to."""
    architecture: ArchitectureSpec
    theta: torch.Tensor

    def __post_init__(self):
        self.theta = torch.as_tensor(self.theta, dtype=DTYPE)
        unflatten(self.architecture, self.theta)

    @property
    def num_parameters(self):
        return int(self.theta.shape[0])

    def clone(self):
        return DenoiserParams(self.architecture, self.theta.detach().clone())

    def is_finite(self):
        return bool(torch.isfinite(self.theta).all())


def init_params(arch: ArchitectureSpec, seed: int = 0, zero_head: bool = True) -> DenoiserParams:
    """
    Weights uniform in +-1/sqrt(fan_in), biases zero, embedding uniform in +-1.
    With zero_head the output layer starts at zero so D(x; sigma) = c_skip(sigma) x.
    """
    gen = rng_util.stream(seed, rng_util.INIT)
    pieces = []
    for name, shape in _layout(arch):
        if name.endswith('bias'):
            tensor = torch.zeros(shape, dtype=DTYPE)
        elif name.startswith('output_layer') and zero_head:
            tensor = torch.zeros(shape, dtype=DTYPE)
        elif name.startswith('class_embedding'):
            tensor = torch.from_numpy(gen.uniform(-1.0, 1.0, shape))
        else:
            bound = 1.0 / math.sqrt(shape[1])
            tensor = torch.from_numpy(gen.uniform(-1.0, 1.0, shape)) * bound
        pieces.append(tensor.reshape(-1))
    return DenoiserParams(arch, torch.cat(pieces))


def _labels_tensor(label, n, null_token):
    if label is None:
        return torch.full((n,), null_token, dtype=torch.long)
    if np.ndim(label) == 0:
        return torch.full((n,), int(label), dtype=torch.long)
    labels = torch.as_tensor(np.asarray(label), dtype=torch.long).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} points")
    return labels


def raw_network(params: DenoiserParams, theta=None):
    """Bind theta (default params.theta) to the template; returns net(x_in, c_noise, label)."""
    arch = params.architecture
    net = template(arch)
    named = unflatten(arch, params.theta if theta is None else theta)

    def call(x_in, c_noise, label):
        x_t = torch.as_tensor(x_in, dtype=DTYPE)
        c_t = torch.as_tensor(np.ascontiguousarray(c_noise), dtype=DTYPE) if not torch.is_tensor(c_noise) else c_noise
        labels = label if torch.is_tensor(label) else _labels_tensor(label, x_t.shape[0], arch.null_token)
        return functional_call(net, named, (x_t, c_t, labels))
    return call


def forward(params: DenoiserParams, cfg, x, sigma, label=None):
    """
    D_theta(x; sigma) through cfg's preconditioning.
    Args:
        params (DenoiserParams): Network weights.
        cfg (BaseDmConfig): DM config.
        x: Points, shape (n, 2) or (2,), numpy or torch.
        sigma (float | array): Noise level(s) > 0.
        label: None (null token), an int, or one label per point.
    Returns:
        Denoised points, same container type and shape as x.
    """
    as_numpy = not torch.is_tensor(x)
    x_t = torch.as_tensor(np.asarray(x) if as_numpy else x, dtype=DTYPE)
    single = x_t.ndim == 1
    x_t = x_t.reshape(-1, 2)
    out = cfg.denoise(raw_network(params), x_t, sigma, label)
    if single:
        out = out[0]
    return out.detach().numpy() if as_numpy else out


class NoiseDraws(NamedTuple):
    sigmas: np.ndarray      # (B, K)
    noise: np.ndarray       # (B, K, 2)
    labels: np.ndarray      # (B,) after conditioning dropout


def draw_noise(cfg, batch, K, seed, step=0, element_ids=None, label_dropout=0.0, null_token=9):
    """
    Per-element draws of (sigma_ik, n_ik) and the dropped-out label. Each element
    reads only its own stream keyed by (seed, step, element id), so adding or
    removing other elements never changes its draws.
    """
    if K < 1:
        raise ValueError("noise multiplicity K must be >= 1")
    B = len(batch)
    ids = np.arange(B) if element_ids is None else np.asarray(element_ids, dtype=np.int64)
    if len(ids) != B:
        raise ValueError(f"{len(ids)} element ids for a batch of {B}")
    sigmas = np.empty((B, K))
    noise = np.empty((B, K, 2))
    labels = batch.labels.copy()
    for i, element in enumerate(ids):
        g = rng_util.stream(seed, rng_util.DIFFUSION_NOISE, step, element)
        if g.random() < label_dropout:
            labels[i] = null_token
        sigmas[i] = cfg.sample_training_sigma(g, size=K)
        noise[i] = g.standard_normal((K, 2)) * sigmas[i][:, None]
    return NoiseDraws(sigmas, noise, labels)


def _coefficients(cfg, sigmas):
    pre = cfg.precondition(sigmas)
    cols = [pre.c_skip, pre.c_out, pre.c_in, pre.c_noise, cfg.loss_weight(sigmas)]
    return [torch.as_tensor(np.ascontiguousarray(c), dtype=DTYPE) for c in cols]


def _element_loss(net, arch, theta, x, n, c_skip, c_out, c_in, c_noise, lam, label):
    """(1/K) sum_k lambda_k |D(x + n_k; sigma_k) - x|^2 for one element."""
    noisy = x + n
    labels = label.expand(n.shape[0])
    f = functional_call(net, unflatten(arch, theta), (c_in[:, None] * noisy, c_noise, labels))
    d = c_skip[:, None] * noisy + c_out[:, None] * f
    return (lam * ((d - x) ** 2).sum(-1)).mean()


def _batch_tensors(cfg, batch, draws):
    coeffs = _coefficients(cfg, draws.sigmas)
    x = torch.as_tensor(batch.points, dtype=DTYPE)
    n = torch.as_tensor(draws.noise, dtype=DTYPE)
    labels = torch.as_tensor(draws.labels, dtype=torch.long)
    return x, n, coeffs, labels


def element_losses(params: DenoiserParams, cfg, batch, draws: NoiseDraws, theta=None):
    """Per-element losses as a differentiable torch tensor of shape (B,)."""
    arch = params.architecture
    theta = params.theta if theta is None else theta
    x, n, (c_skip, c_out, c_in, c_noise, lam), labels = _batch_tensors(cfg, batch, draws)
    B, K = draws.sigmas.shape
    noisy = (x[:, None, :] + n).reshape(B * K, 2)
    flat_labels = labels[:, None].expand(B, K).reshape(-1)
    f = functional_call(template(arch), unflatten(arch, theta),
                        (c_in.reshape(-1, 1) * noisy, c_noise.reshape(-1), flat_labels))
    d = c_skip.reshape(-1, 1) * noisy + c_out.reshape(-1, 1) * f
    sq = ((d.reshape(B, K, 2) - x[:, None, :]) ** 2).sum(-1)
    return (lam * sq).mean(dim=1)


def per_sample_loss_and_grads(params: DenoiserParams, cfg, batch, K: int, seed: int = 0, step: int = 0,
                              element_ids=None, label_dropout: float = 0.0, chunk_size: int = 128):
    """
    Noise-multiplicity loss and its exact parameter gradient for every batch element.
    Args:
        params (DenoiserParams): Current weights.
        cfg (BaseDmConfig): DM config providing p(sigma), lambda(sigma) and preconditioning.
        batch (LabeledSamples): Non-empty batch.
        K (int): Noise multiplicity, >= 1.
        seed (int), step (int): Stream key; element_ids default to batch positions.
        label_dropout (float): Probability of replacing an element's label by the null token.
        chunk_size (int): Elements per vectorised reverse pass.
    Returns:
        tuple: (losses numpy (B,), grads torch (B, P))
    Raises:
        ValueError: K < 1 or empty batch.
    """
    if K < 1:
        raise ValueError("noise multiplicity K must be >= 1")
    if len(batch) == 0:
        raise ValueError("per-sample gradients need a non-empty batch")
    arch = params.architecture
    draws = draw_noise(cfg, batch, K, seed, step, element_ids, label_dropout, arch.null_token)
    x, n, coeffs, labels = _batch_tensors(cfg, batch, draws)
    net = template(arch)
    theta = params.theta.detach()

    def loss_fn(th, xi, ni, cs, co, ci, cn, lam, label):
        return _element_loss(net, arch, th, xi, ni, cs, co, ci, cn, lam, label)

    per_element = vmap(grad_and_value(loss_fn), in_dims=(None, 0, 0, 0, 0, 0, 0, 0, 0))
    grads, losses = [], []
    for start in range(0, len(batch), chunk_size):
        sl = slice(start, start + chunk_size)
        g, v = per_element(theta, x[sl], n[sl], *(c[sl] for c in coeffs), labels[sl])
        grads.append(g)
        losses.append(v)
    return torch.cat(losses).numpy(), torch.cat(grads)


@dataclass
class EmaParams:
    theta_ema: torch.Tensor
    decay: float = 0.999

    def __post_init__(self):
        self.theta_ema = torch.as_tensor(self.theta_ema, dtype=DTYPE)
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")

    @classmethod
    def from_params(cls, params: DenoiserParams, decay=0.999):
        return cls(params.theta.detach().clone(), decay)


def ema_update(ema: EmaParams, params: DenoiserParams) -> EmaParams:
    """theta_ema <- decay * theta_ema + (1 - decay) * theta."""
    if ema.theta_ema.shape != params.theta.shape:
        raise ValueError(f"EMA shadow has shape {tuple(ema.theta_ema.shape)}, "
                         f"parameters have {tuple(params.theta.shape)}")
    theta = params.theta.detach()
    if ema.decay == 1.0:
        shadow = ema.theta_ema.clone()
    elif ema.decay == 0.0:
        shadow = theta.clone()
    else:
        shadow = ema.decay * ema.theta_ema + (1.0 - ema.decay) * theta
    return EmaParams(shadow, ema.decay)


def _chunk(value, start, size):
    """Slice a per-point array along with its chunk of points; scalars and None pass through."""
    if value is None or np.ndim(value) == 0:
        return value
    return np.asarray(value)[start:start + size]


class NetworkDenoiser:
    """
    Callable D(x, sigma) -> numpy over trained weights, for samplers and metrics.
    """
    stochastic = False

    def __init__(self, params: DenoiserParams, cfg, label=None, chunk_size=16384):
        self.params = params
        self.cfg = cfg
        self.label = label
        self.chunk_size = chunk_size
        self.logger = logging.getLogger(self.__class__.__name__)

    def with_label(self, label):
        return NetworkDenoiser(self.params, self.cfg, label, self.chunk_size)

    def __call__(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        pts = x.reshape(-1, 2)
        outs = []
        with torch.no_grad():
            for start in range(0, len(pts), self.chunk_size):
                chunk = pts[start:start + self.chunk_size]
                label = _chunk(self.label, start, self.chunk_size)
                outs.append(forward(self.params, self.cfg, chunk, _chunk(sigma, start, self.chunk_size), label))
        out = np.concatenate(outs) if outs else np.zeros((0, 2))
        return out[0] if single else out

    def jacobian(self, x, sigma):
        """Exact d D / d x for every point, shape (n, 2, 2), by reverse mode. sigma and label are scalars here."""
        if np.ndim(sigma) > 0 or np.ndim(self.label) > 0:
            raise ValueError("jacobian needs a scalar sigma and a scalar label")
        pts = torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(-1, 2), dtype=DTYPE)
        pre = self.cfg.precondition(float(sigma))
        net = raw_network(self.params)
        label = self.params.architecture.null_token if self.label is None else int(self.label)
        c_noise = torch.tensor([pre.c_noise], dtype=DTYPE)
        label_t = torch.tensor([label], dtype=torch.long)

        def denoise_point(p):
            return pre.c_skip * p + pre.c_out * net(pre.c_in * p[None, :], c_noise, label_t)[0]

        return vmap(jacrev(denoise_point))(pts).detach().numpy()
