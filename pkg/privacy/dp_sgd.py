"""
DP-SGD training of the denoiser: Poisson subsampling, per-sample clipping,
Gaussian sanitisation with the expected batch size as divisor, Adam on the
sanitised gradient only, then an EMA update. Empty batches still release a
noise-only gradient and count as a composition step.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from diffusion import denoiser as dn
from utils import rng_util
from utils.csv_util import CsvAppender

logger = logging.getLogger("DpSgd")

LOG_COLUMNS = ['step', 'loss_mean', 'realized_B', 'median_grad_norm', 'fraction_clipped']


class TrainingDivergedError(RuntimeError):
    """Parameters became non-finite during training."""


class ClippingError(RuntimeError):
    """A clipped per-sample gradient still exceeds the clip norm."""


@dataclass(frozen=True)
class PrivacySpec:
    """
    clip_C = inf together with sigma_dp = 0 is the non-private sentinel.
    """
    clip_C: float = 1.0
    sigma_dp: float = 1.0
    subsample_q: float = 0.01
    total_steps_T: int = 0
    delta: float = 1e-5

    def __post_init__(self):
        if not self.clip_C > 0:
            raise ValueError("clip_C must be positive")
        if not self.sigma_dp >= 0:
            raise ValueError("sigma_dp must be non-negative")
        if math.isinf(self.clip_C) and self.sigma_dp > 0:
            raise ValueError("an infinite clip_C needs sigma_dp = 0")
        if not 0 < self.subsample_q <= 1:
            raise ValueError("subsample_q must lie in (0, 1]")
        if self.total_steps_T < 0:
            raise ValueError("total_steps_T must be non-negative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    @property
    def is_private(self):
        return self.sigma_dp > 0 and math.isfinite(self.clip_C)

    @classmethod
    def non_private(cls, subsample_q, total_steps_T):
        return cls(math.inf, 0.0, subsample_q, total_steps_T)


@dataclass(frozen=True)
class OptimizerSpec:
    learning_rate: float = 3e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    ema_decay: float = 0.999

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")


@dataclass
class SanitizedGradient:
    vector: torch.Tensor
    actual_batch_size: int


@dataclass
class StepRecord:
    step: int
    loss_mean: float
    realized_B: int
    median_grad_norm: float
    fraction_clipped: float

    def row(self):
        return [self.step, self.loss_mean, self.realized_B, self.median_grad_norm, self.fraction_clipped]


@dataclass
class TrainingLog:
    records: List[StepRecord] = field(default_factory=list)
    sanitize_calls: int = 0
    privacy: Optional[PrivacySpec] = None

    @property
    def steps(self):
        return len(self.records)


def poisson_sample(n: int, q: float, rng) -> np.ndarray:
    """
    Include each of n indices independently with probability q.
    Returns:
        numpy.ndarray: Sorted selected indices, possibly empty.
    """
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    if not isinstance(rng, np.random.Generator):
        rng = rng_util.stream(rng, rng_util.POISSON)
    if q == 0:
        return np.zeros(0, dtype=np.int64)
    if q == 1:
        return np.arange(n, dtype=np.int64)
    return np.flatnonzero(rng.random(n) < q).astype(np.int64)


def clip(g, C: float):
    """min(1, C / |g|) g, with clip(0) = 0. Works on a vector or row-wise on a matrix."""
    if not C > 0:
        raise ValueError("C must be positive")
    g = torch.as_tensor(g, dtype=dn.DTYPE)
    if math.isinf(C):
        return g.clone()
    norms = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
    factor = torch.where(norms > C, C / torch.where(norms > 0, norms, torch.ones_like(norms)),
                         torch.ones_like(norms))
    return g * factor


def sanitize(per_sample, C: float, sigma_dp: float, expected_B: float, rng,
             num_parameters: Optional[int] = None) -> SanitizedGradient:
    """
    G = (1/B) sum_i clip_C(row_i) + (C/B) z with z ~ N(0, sigma_dp^2 I) and B the EXPECTED batch size.
    Args:
        per_sample (torch.Tensor): (b, P) per-sample gradients; b may be 0.
        C (float): Clip norm.
        sigma_dp (float): Noise multiplier; 0 disables noise.
        expected_B (float): Divisor, q * N.
        rng (int | numpy.random.Generator): Source of the Gaussian noise.
        num_parameters (int, optional): P when per_sample has no rows to infer it from.
    Returns:
        SanitizedGradient
    """
    if not expected_B > 0:
        raise ValueError("expected_B must be positive")
    rows = torch.as_tensor(per_sample, dtype=dn.DTYPE)
    P = rows.shape[-1] if rows.ndim == 2 and rows.shape[0] > 0 else num_parameters
    if P is None:
        P = rows.shape[-1]
    clipped = clip(rows.reshape(-1, P), C) if rows.numel() else torch.zeros((0, P), dtype=dn.DTYPE)
    bound = C * (1 + 1e-12)
    if clipped.shape[0] and not math.isinf(C):
        # NaN rows fall through to the divergence check in train
        worst = float(torch.linalg.vector_norm(clipped, dim=1).max())
        if worst > bound:
            raise ClippingError(f"clipped row has norm {worst!r} > C={C!r}")
    total = clipped.sum(dim=0)
    if sigma_dp > 0:
        if not isinstance(rng, np.random.Generator):
            rng = rng_util.stream(rng, rng_util.DP_NOISE)
        z = torch.as_tensor(rng.standard_normal(P) * sigma_dp, dtype=dn.DTYPE)
        total = total + C * z
    return SanitizedGradient(total / expected_B, int(clipped.shape[0]))


def _finite_or_raise(params, step, record):
    if not params.is_finite():
        raise TrainingDivergedError(
            f"non-finite parameters after step {step}: loss_mean={record.loss_mean}, "
            f"realized_B={record.realized_B}, median_grad_norm={record.median_grad_norm}")


def train(data, cfg, privacy: PrivacySpec, opt: OptimizerSpec, K: int = 1, epochs: Optional[float] = None,
          rng: int = 0, architecture: Optional[dn.ArchitectureSpec] = None, label_dropout: float = 0.1,
          init: Optional[dn.DenoiserParams] = None, log_path: Optional[str] = None,
          log_every: int = 100, progress: bool = False, on_release=None):
    """
    Run DP-SGD for privacy.total_steps_T steps (or epochs * round(1/q) when epochs is given and T is 0).
    Args:
        data (LabeledSamples): Private training set.
        cfg (BaseDmConfig): DM config.
        privacy (PrivacySpec): C, sigma_dp, q, T, delta.
        opt (OptimizerSpec): Adam and EMA settings.
        K (int): Noise multiplicity.
        epochs (float, optional): Used only when privacy.total_steps_T is 0.
        rng (int): Run seed; every stream is derived from it.
        architecture (ArchitectureSpec, optional): Network shape for a fresh init.
        label_dropout (float): Conditioning dropout rate.
        init (DenoiserParams, optional): Starting weights.
        log_path (str, optional): Per-step CSV.
        log_every (int): Summary logging cadence.
        progress (bool): Show a tqdm bar.
        on_release (callable, optional): Called with (step, SanitizedGradient) after every release.
    Returns:
        tuple: (DenoiserParams, EmaParams, TrainingLog)
    Raises:
        TrainingDivergedError: If parameters become non-finite.
    """
    if K < 1:
        raise ValueError("noise multiplicity K must be >= 1")
    N = len(data)
    if N == 0:
        raise ValueError("training data is empty")
    q = privacy.subsample_q
    T = privacy.total_steps_T
    if T == 0 and epochs is not None:
        T = int(round(epochs * round(1.0 / q)))
    expected_B = q * N
    seed = int(rng)

    params = init.clone() if init is not None else dn.init_params(architecture or dn.ArchitectureSpec(), seed)
    theta = torch.nn.Parameter(params.theta.clone())
    optimizer = torch.optim.Adam([theta], lr=opt.learning_rate, betas=tuple(opt.betas), eps=opt.eps)
    ema = dn.EmaParams.from_params(params, opt.ema_decay)
    log = TrainingLog(privacy=privacy)
    writer = CsvAppender(log_path, LOG_COLUMNS) if log_path else None
    logger.info(f"DP-SGD: N={N} q={q:.6g} expected_B={expected_B:.6g} T={T} K={K} C={privacy.clip_C} "
                f"sigma_dp={privacy.sigma_dp} params={params.num_parameters}")
    try:
        for step in tqdm(range(T), disable=not progress, desc='train'):
            indices = poisson_sample(N, q, rng_util.stream(seed, rng_util.POISSON, step))
            current = dn.DenoiserParams(params.architecture, theta.detach())
            if len(indices):
                losses, grads = dn.per_sample_loss_and_grads(
                    current, cfg, data.subset(indices), K, seed=seed, step=step,
                    element_ids=indices, label_dropout=label_dropout)
                norms = torch.linalg.vector_norm(grads, dim=1)
                record = StepRecord(step, float(np.mean(losses)), len(indices), float(norms.median()),
                                    float((norms > privacy.clip_C).double().mean()))
            else:
                grads = torch.zeros((0, params.num_parameters), dtype=dn.DTYPE)
                record = StepRecord(step, math.nan, 0, math.nan, 0.0)
            released = sanitize(grads, privacy.clip_C, privacy.sigma_dp, expected_B,
                                rng_util.stream(seed, rng_util.DP_NOISE, step), params.num_parameters)
            log.sanitize_calls += 1
            if on_release is not None:
                on_release(step, released)
            optimizer.zero_grad(set_to_none=True)
            theta.grad = released.vector.clone()
            optimizer.step()
            params = dn.DenoiserParams(params.architecture, theta.detach().clone())
            _finite_or_raise(params, step, record)
            ema = dn.ema_update(ema, params)
            log.records.append(record)
            if writer:
                writer.append(record.row())
            if log_every and (step + 1) % log_every == 0:
                logger.info(f"step {step + 1}/{T} loss_mean={record.loss_mean:.5g} B={record.realized_B} "
                            f"clipped={record.fraction_clipped:.3f}")
    finally:
        if writer:
            writer.close()
    return params, ema, log
