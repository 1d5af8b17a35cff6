"""
Quantitative evaluation: Jacobian-Frobenius complexity of denoisers and of the
end-to-end deterministic sampler, noise-multiplicity variance measurements and
mode-coverage summaries.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from diffusion import denoiser as dn
from diffusion import samplers
from oracle import gmm_oracle
from oracle.gmm_oracle import GmmSpec, LabeledSamples
from utils import rng_util
from utils.csv_util import write_rows

logger = logging.getLogger("Metrics")

FD_RELATIVE_STEP = 1e-4
HISTOGRAM_BINS = 50


@dataclass
class ComplexityReport:
    per_sigma: List[Tuple[float, float, float]] = field(default_factory=list)
    end_to_end: Optional[Tuple[float, float]] = None

    def to_csv(self, path):
        rows = [('denoiser', s, est, err) for s, est, err in self.per_sigma]
        if self.end_to_end is not None:
            rows.append(('end_to_end', math.nan, *self.end_to_end))
        return write_rows(path, ['kind', 'sigma', 'jf_estimate', 'stderr'], rows)


@dataclass
class VarianceEntry:
    K: int
    mean_variance: float
    bin_edges: np.ndarray
    counts: np.ndarray


@dataclass
class VarianceReport:
    entries: List[VarianceEntry] = field(default_factory=list)

    def __post_init__(self):
        ks = [e.K for e in self.entries]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("K values must be strictly increasing")

    def ratio(self, k_num, k_den):
        by_k = {e.K: e.mean_variance for e in self.entries}
        return by_k[k_num] / by_k[k_den]

    def to_csv(self, path):
        return write_rows(path, ['K', 'mean_variance'], [(e.K, e.mean_variance) for e in self.entries])

    def histogram_csv(self, path):
        rows = []
        for e in self.entries:
            for lo, hi, c in zip(e.bin_edges[:-1], e.bin_edges[1:], e.counts):
                rows.append((e.K, float(lo), float(hi), int(c)))
        return write_rows(path, ['K', 'bin_low', 'bin_high', 'count'], rows)


def _mc_mean(values):
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(len(values)))


def finite_difference_jacobian(fn, x, rel_step=FD_RELATIVE_STEP):
    """Central differences of fn: (n, 2) -> (n, 2), step rel_step * max(1, |x_j|); returns (n, 2, 2)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    jac = np.empty((len(x), 2, 2))
    for j in range(2):
        h = rel_step * np.maximum(1.0, np.abs(x[:, j]))
        e = np.zeros_like(x)
        e[:, j] = h
        jac[:, :, j] = (fn(x + e) - fn(x - e)) / (2 * h[:, None])
    return jac


def denoiser_jacobian(D, x, sigma, exact=True):
    """Exact reverse-mode Jacobian when D offers one, central differences otherwise."""
    if exact and hasattr(D, 'jacobian'):
        return D.jacobian(x, sigma)
    return finite_difference_jacobian(lambda p: D(p, sigma), x)


def jacobian_frobenius_denoiser(D, sigma, n_mc, rng, spec: GmmSpec = None, exact=True):
    """
    E_{x ~ p(x; sigma)} |grad_x D(x, sigma)|_F^2 by Monte Carlo.
    Args:
        D: Denoiser callable.
        sigma (float): Noise level.
        n_mc (int): Number of draws, >= 2.
        rng (int | numpy.random.Generator): Seed for the draws.
        spec (GmmSpec, optional): Mixture to perturb; default nine-mode mixture.
        exact (bool): Prefer D.jacobian over finite differences.
    Returns:
        tuple: (estimate, standard error)
    """
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    spec = spec or GmmSpec.default()
    gen = rng if isinstance(rng, np.random.Generator) else rng_util.stream(rng, rng_util.METRICS)
    x = gmm_oracle.sample_perturbed(spec, sigma, n_mc, gen)
    jac = denoiser_jacobian(D, x, sigma, exact)
    return _mc_mean(np.sum(jac ** 2, axis=(1, 2)))


def jacobian_frobenius_endtoend(S, n_mc, rng, input_scale=1.0):
    """
    E_{z ~ N(0, I)} |grad_z S(input_scale * z)|_F^2 with central differences per input coordinate.
    Raises:
        ValueError: If S is stochastic (its Jacobian is undefined).
    """
    if getattr(S, 'stochastic', False):
        raise ValueError("end-to-end Jacobian needs a deterministic sampler map")
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    gen = rng if isinstance(rng, np.random.Generator) else rng_util.stream(rng, rng_util.METRICS)
    z = gen.standard_normal((n_mc, 2))
    jac = finite_difference_jacobian(lambda p: S(input_scale * p), z)
    return _mc_mean(np.sum(jac ** 2, axis=(1, 2)))


def complexity_report(D, sigmas: Sequence[float], n_mc: int, rng: int, spec: GmmSpec = None,
                      schedule: Optional[samplers.ScheduleSpec] = None, n_mc_endtoend: Optional[int] = None):
    """Per-sigma J_F(sigma) and, when schedule is given, the deterministic-DDIM end-to-end J_F."""
    report = ComplexityReport()
    for i, sigma in enumerate(sigmas):
        est, err = jacobian_frobenius_denoiser(D, sigma, n_mc, rng_util.stream(rng, rng_util.METRICS, i), spec)
        report.per_sigma.append((float(sigma), est, err))
        logger.info(f"J_F(sigma={sigma:g}) = {est:.6g} +- {err:.2g}")
    if schedule is not None:
        flow = samplers.DeterministicDdimMap(D, schedule)
        report.end_to_end = jacobian_frobenius_endtoend(
            flow, n_mc_endtoend or n_mc, rng_util.stream(rng, rng_util.METRICS, len(sigmas)), schedule.sigma_max)
        logger.info(f"End-to-end J_F = {report.end_to_end[0]:.6g} +- {report.end_to_end[1]:.2g}")
    return report


def _repeat(sample, n):
    point = np.asarray(tuple(sample.point), dtype=np.float64)
    return LabeledSamples(np.tile(point, (n, 1)), np.full(n, sample.label))


def per_parameter_variance(sum_g, sum_g2, n):
    """Unbiased per-parameter variance from running sums."""
    mean = sum_g / n
    return torch.clamp((sum_g2 - n * mean ** 2) / (n - 1), min=0.0)


def gradient_variance_experiment(params, cfg, x, K_list, n_reseeds, rng, label_dropout=0.0, chunk_size=128):
    """
    Per-parameter variance of the noise-multiplicity gradient for one data point.
    Each reseed r re-draws (sigma, n) from the stream keyed by element id r.
    Returns:
        VarianceReport
    """
    if n_reseeds < 100:
        raise ValueError("n_reseeds must be >= 100")
    entries = []
    for K in sorted(K_list):
        sum_g = torch.zeros(params.num_parameters, dtype=dn.DTYPE)
        sum_g2 = torch.zeros_like(sum_g)
        for start in range(0, n_reseeds, chunk_size):
            ids = np.arange(start, min(start + chunk_size, n_reseeds))
            _, grads = dn.per_sample_loss_and_grads(params, cfg, _repeat(x, len(ids)), K, seed=rng, step=K,
                                                    element_ids=ids, label_dropout=label_dropout)
            sum_g += grads.sum(dim=0)
            sum_g2 += (grads ** 2).sum(dim=0)
        var = per_parameter_variance(sum_g, sum_g2, n_reseeds).numpy()
        positive = var[var > 0]
        if len(positive):
            edges = np.logspace(np.log10(positive.min()), np.log10(positive.max()), HISTOGRAM_BINS + 1)
            counts, _ = np.histogram(positive, bins=edges)
        else:
            edges, counts = np.zeros(HISTOGRAM_BINS + 1), np.zeros(HISTOGRAM_BINS, dtype=np.int64)
        entries.append(VarianceEntry(int(K), float(var.mean()), edges, counts))
        logger.info(f"K={K}: mean per-parameter gradient variance {var.mean():.6g}")
    return VarianceReport(entries)


def loss_variance(params, cfg, x, K, n_reseeds, rng, label_dropout=0.0, chunk_size=2048):
    """Sample variance of the noise-multiplicity loss of one data point over n_reseeds redraws."""
    if n_reseeds < 2:
        raise ValueError("variance needs n_reseeds >= 2")
    losses = []
    with torch.no_grad():
        for start in range(0, n_reseeds, chunk_size):
            ids = np.arange(start, min(start + chunk_size, n_reseeds))
            batch = _repeat(x, len(ids))
            draws = dn.draw_noise(cfg, batch, K, rng, K, ids, label_dropout, params.architecture.null_token)
            losses.append(dn.element_losses(params, cfg, batch, draws).numpy())
    return float(np.var(np.concatenate(losses), ddof=1))


def loss_variance_slope(params, cfg, x, K_list, n_reseeds, rng):
    """Least-squares slope of log Var against log K, plus the variances themselves."""
    variances = [loss_variance(params, cfg, x, K, n_reseeds, rng) for K in K_list]
    slope = float(np.polyfit(np.log(K_list), np.log(variances), 1)[0])
    return slope, variances


def vicinity_table(spec: GmmSpec, samples, hs=(1, 2, 3, 4, 5, 6)):
    """[(h, fraction within h * std of a mode)] for each h."""
    return [(h, gmm_oracle.h_vicinity(spec, samples, h)) for h in hs]


def weighting_table(configs, sigmas):
    """Rows (kind, sigma, p(sigma), lambda(sigma), weight relative to EDM) for each config."""
    rows = []
    for cfg in configs:
        for s in sigmas:
            rows.append((cfg.kind, float(s), float(cfg.sigma_density(s)), float(cfg.loss_weight(s)),
                         float(cfg.effective_weight(s))))
    return rows


def churn_grid(D, spec: GmmSpec, schedule: samplers.ScheduleSpec, s_churn_values, n, rng,
               base: samplers.ChurnSpec = None, h=3, guidance_scales=(None,), d_uncond=None, label=None):
    """
    h-vicinity coverage of the Churn sampler over a grid of S_churn (and guidance scale) values.
    D is the conditional denoiser when guidance scales are given, with d_uncond its unconditional twin.
    """
    base = base or samplers.ChurnSpec(0.0, 0.05, 50.0, 1.0)
    rows = []
    for w in guidance_scales:
        denoiser = D if w is None else samplers.guided_denoiser(D, d_uncond, samplers.GuidanceSpec(w, label))
        for s_churn in s_churn_values:
            churn = samplers.ChurnSpec(s_churn, base.s_min, base.s_max, base.s_noise)
            out = samplers.churn_sample(denoiser, schedule, churn, n, rng)
            rows.append((math.nan if w is None else w, float(s_churn), gmm_oracle.h_vicinity(spec, out, h)))
    return rows
