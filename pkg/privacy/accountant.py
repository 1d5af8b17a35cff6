"""
Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Per-step RDP uses the integer-order binomial bound
    eps(a) = log( sum_j C(a, j) (1-q)^(a-j) q^j exp(j(j-1) / (2 sigma^2)) ) / (a - 1)
evaluated in log space; T steps compose additively and the curve converts to
(eps, delta)-DP either with the classic rule rdp + log(1/delta)/(a-1) or the
refined rule that also subtracts log(a)/(a-1) and adds log((a-1)/a).
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp

logger = logging.getLogger("Accountant")

DEFAULT_ORDERS = tuple(range(2, 65)) + (128, 256)
DEFAULT_BRACKET = (0.3, 500.0)


class CalibrationError(RuntimeError):
    """Raised when sigma cannot be bracketed for the requested budget."""


class InfeasibleBudgetError(CalibrationError):
    """Raised when a configured run exceeds its privacy budget."""


@dataclass(frozen=True)
class RdpCurve:
    """(order, rdp epsilon) pairs with strictly increasing orders."""
    orders: Tuple[float, ...]
    epsilons: Tuple[float, ...]

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        eps = tuple(float(e) for e in self.epsilons)
        if len(orders) != len(eps):
            raise ValueError(f"{len(orders)} orders but {len(eps)} epsilons")
        if any(a <= 1 for a in orders):
            raise ValueError("RDP orders must exceed 1")
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise ValueError("RDP orders must be strictly increasing")
        if any(not (e >= 0 and math.isfinite(e)) for e in eps):
            raise ValueError("RDP epsilons must be finite and non-negative")
        object.__setattr__(self, 'orders', orders)
        object.__setattr__(self, 'epsilons', eps)

    def __len__(self):
        return len(self.orders)

    def items(self):
        return list(zip(self.orders, self.epsilons))


@dataclass(frozen=True)
class DpBudget:
    epsilon: float
    delta: float
    order: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


def rdp_gaussian(alpha: float, sigma: float) -> float:
    """RDP of the Gaussian mechanism with unit sensitivity: alpha / (2 sigma^2)."""
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if math.isinf(sigma):
        return 0.0
    return alpha / (2.0 * sigma ** 2)


def rdp_subsampled_gaussian(alpha: int, q: float, sigma: float) -> float:
    """
    Integer-order RDP upper bound for one Poisson-subsampled Gaussian release.
    Args:
        alpha (int): Order, integer >= 2.
        q (float): Sampling rate in [0, 1].
        sigma (float): Noise multiplier > 0.
    Returns:
        float: RDP epsilon at alpha; 0 for q = 0 and exactly rdp_gaussian for q = 1.
    Raises:
        ValueError: Non-integer alpha or out-of-range q/sigma.
    """
    if float(alpha) != int(alpha) or alpha < 2:
        raise ValueError(f"alpha must be an integer >= 2, got {alpha}")
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    alpha = int(alpha)
    if q == 0:
        return 0.0
    if q == 1:
        return rdp_gaussian(alpha, sigma)
    j = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(j + 1) - gammaln(alpha - j + 1)
    log_terms = log_binom + (alpha - j) * math.log1p(-q) + j * math.log(q) + j * (j - 1) / (2 * sigma ** 2)
    return max(float(logsumexp(log_terms)) / (alpha - 1), 0.0)


def rdp_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    """Per-step curve of the subsampled Gaussian over the given integer orders."""
    return RdpCurve(tuple(orders), tuple(rdp_subsampled_gaussian(a, q, sigma) for a in orders))


def compose(per_step: RdpCurve, T: int) -> RdpCurve:
    """T-fold adaptive composition: every epsilon scales by T."""
    if T < 0:
        raise ValueError("T must be non-negative")
    return RdpCurve(per_step.orders, tuple(T * e for e in per_step.epsilons))


def to_dp(curve: RdpCurve, delta: float, refined: bool = False) -> DpBudget:
    """
    Convert an RDP curve to (eps, delta)-DP, minimising over orders.
    Args:
        curve (RdpCurve): Composed curve, non-empty.
        delta (float): Target delta in (0, 1).
        refined (bool): Use the refined conversion instead of rdp + log(1/delta)/(a-1).
    Returns:
        DpBudget: eps, delta and the order attaining the minimum (smallest on ties).
    Raises:
        ValueError: Empty curve or delta outside (0, 1).
    """
    if len(curve) == 0:
        raise ValueError("cannot convert an empty RDP curve")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    best_eps, best_order = math.inf, None
    for a, rdp in curve.items():
        if refined:
            eps = rdp + math.log1p(-1.0 / a) - (math.log(delta) + math.log(a)) / (a - 1)
        else:
            eps = rdp + math.log(1.0 / delta) / (a - 1)
        if eps < best_eps:
            best_eps, best_order = eps, a
    return DpBudget(max(best_eps, 0.0), delta, best_order)


def steps_for(n: int, batch_size: int, epochs: float, convention: str = 'round') -> int:
    """
    Composition steps for `epochs` passes at expected batch size B over n records.
    'round' uses epochs * round(n / B); 'ceil' uses ceil(epochs * n / B).
    """
    if batch_size <= 0 or n <= 0:
        raise ValueError("n and batch_size must be positive")
    if convention == 'round':
        return int(round(epochs * round(n / batch_size)))
    if convention == 'ceil':
        return int(math.ceil(epochs * n / batch_size))
    raise ValueError(f"Unknown step convention '{convention}', expected 'round' or 'ceil'")


def epsilon_for(sigma: float, q: float, T: int, delta: float, orders=DEFAULT_ORDERS, refined=False) -> DpBudget:
    """(eps, delta) of T Poisson-subsampled Gaussian releases."""
    if T == 0:
        return DpBudget(0.0, delta, None)
    return to_dp(compose(rdp_curve(q, sigma, orders), T), delta, refined)


def calibrate_sigma(target: DpBudget, q: float, T: int, tolerance: float = 1e-4,
                    bracket=DEFAULT_BRACKET, orders=DEFAULT_ORDERS, refined=False) -> float:
    """
    Smallest sigma in the bracket whose composed epsilon does not exceed target.epsilon.
    Args:
        target (DpBudget): Budget to meet.
        q (float): Sampling rate.
        T (int): Number of steps.
        tolerance (float): Relative width at which bisection stops.
        bracket (tuple): (low, high) search interval.
        orders: RDP orders.
        refined (bool): Conversion variant.
    Returns:
        float: sigma; the returned value always satisfies the budget.
    Raises:
        CalibrationError: If even bracket[1] exceeds the budget.
    """
    low, high = float(bracket[0]), float(bracket[1])
    if not 0 < low < high:
        raise ValueError(f"invalid bracket {bracket}")
    if T == 0:
        return low

    def eps_at(s):
        return epsilon_for(s, q, T, target.delta, orders, refined).epsilon

    eps_low, eps_high = eps_at(low), eps_at(high)
    if eps_high > target.epsilon:
        raise CalibrationError(
            f"target eps={target.epsilon} at delta={target.delta} unreachable: eps({high})={eps_high:.6g}, "
            f"eps({low})={eps_low:.6g} for q={q}, T={T}")
    if eps_low <= target.epsilon:
        return low
    while (high - low) > tolerance * high:
        mid = 0.5 * (low + high)
        if eps_at(mid) > target.epsilon:
            low = mid
        else:
            high = mid
    logger.info(f"Calibrated sigma={high:.6g} for eps={target.epsilon} delta={target.delta} q={q:.6g} T={T}")
    return high


def classical_gaussian_sigma(epsilon: float, delta: float, clip: float = 1.0) -> float:
    """Single-release sufficient noise sqrt(2 ln(1.25/delta)) * C / eps."""
    if not (epsilon > 0 and 0 < delta < 1 and clip > 0):
        raise ValueError("need epsilon > 0, delta in (0, 1) and clip > 0")
    return math.sqrt(2 * math.log(1.25 / delta)) * clip / epsilon


@dataclass(frozen=True)
class AccountingResult:
    """What the CLI and the run manifest report for one configuration."""
    sigma: float
    q: float
    steps: int
    budget: DpBudget
    curve: RdpCurve
    refined: bool

    def rows(self):
        return [(a, e, e + (math.log1p(-1.0 / a) - (math.log(self.budget.delta) + math.log(a)) / (a - 1)
                            if self.refined else e + math.log(1 / self.budget.delta) / (a - 1)))
                for a, e in self.curve.items()]


def account(sigma: float, q: float, T: int, delta: float, orders=DEFAULT_ORDERS, refined=False) -> AccountingResult:
    """Composed curve plus its (eps, delta) conversion."""
    curve = compose(rdp_curve(q, sigma, orders), T)
    budget = DpBudget(0.0, delta, None) if T == 0 else to_dp(curve, delta, refined)
    return AccountingResult(sigma, q, T, budget, curve, refined)
