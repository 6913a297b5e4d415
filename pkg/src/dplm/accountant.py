"""(epsilon, delta) accounting for composed subsampled Gaussian mechanisms.

Tracks integer-order Renyi divergence bounds (log-moments) of the sampled
Gaussian mechanism across training steps, converts them to an
(epsilon, delta) guarantee, and applies the group-privacy rescaling
epsilon -> epsilon / gamma for contributors with up to gamma sentences.

The per-step bound at integer order lam is the exact binomial expansion

    (1/(lam-1)) * log sum_{j=0..lam} C(lam,j) q^j (1-q)^(lam-j)
                                     exp(j(j-1) / (2 sigma^2))

evaluated entirely in log space; composition over steps is additive. The
resulting epsilon = min_lam [rdp(lam) + log(1/delta)/(lam-1)] is the
classical conversion and therefore a valid upper bound; newer converters
can be tighter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

#: Integer orders tracked by default. The exact binomial expansion is only
#: valid at integer orders.
DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 257))

STANDARD_ASSUMPTION = "sampled-gaussian,q=L/N"
PER_EXAMPLE_NOISE_ASSUMPTION = "per-example-noise,non-standard"


class AccountingError(ValueError):
    """Raised for invalid privacy-accounting inputs."""


@dataclass
class LedgerEntry:
    q: float
    sigma: float
    steps: int


@dataclass
class PrivacyLedger:
    """Record of the subsampled Gaussian mechanisms a training run consumed."""

    entries: list[LedgerEntry] = field(default_factory=list)
    assumption: str = STANDARD_ASSUMPTION

    def record(self, q: float, sigma: float, steps: int = 1) -> None:
        """Append steps, merging into the last entry when (q, sigma) match."""
        if steps < 1:
            raise AccountingError("steps must be a positive integer")
        if self.entries and self.entries[-1].q == q and self.entries[-1].sigma == sigma:
            self.entries[-1].steps += steps
        else:
            self.entries.append(LedgerEntry(q, sigma, steps))

    @property
    def total_steps(self) -> int:
        return sum(e.steps for e in self.entries)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# assumption={self.assumption}\n")
            fh.write("q,sigma,steps\n")
            for e in self.entries:
                fh.write(f"{e.q!r},{e.sigma!r},{e.steps}\n")

    @classmethod
    def load(cls, path: str | Path) -> "PrivacyLedger":
        ledger = cls(entries=[])
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("# assumption="):
                    ledger.assumption = line.split("=", 1)[1]
                elif line and not line.startswith("#") and line != "q,sigma,steps":
                    q, sigma, steps = line.split(",")
                    ledger.entries.append(LedgerEntry(float(q), float(sigma), int(steps)))
        return ledger


@dataclass
class RdpCurve:
    """Cumulative Renyi divergence bound per tracked order."""

    orders: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        if len(self.orders) != len(self.values):
            raise AccountingError("orders and values must have equal length")


def _log_binomial(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def rdp_subsampled_gaussian(q: float, sigma: float, order: int) -> float:
    """Renyi divergence bound of one subsampled Gaussian step at `order`."""
    if isinstance(order, float) and not order.is_integer():
        raise AccountingError("fractional orders are out of scope; use integers >= 2")
    order = int(order)
    if order < 2:
        raise AccountingError("order must be an integer >= 2")
    if q < 0.0 or q > 1.0:
        raise AccountingError("sampling rate q must lie in [0, 1]")
    if sigma <= 0.0:
        raise AccountingError("sigma must be positive to account privacy")
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return order / (2.0 * sigma * sigma)
    log_terms = np.empty(order + 1)
    log_q = math.log(q)
    log_1mq = math.log1p(-q)
    for j in range(order + 1):
        log_terms[j] = (
            _log_binomial(order, j)
            + j * log_q
            + (order - j) * log_1mq
            + (j * j - j) / (2.0 * sigma * sigma)
        )
    m = float(np.max(log_terms))
    log_moment = m + math.log(float(np.sum(np.exp(log_terms - m))))
    return log_moment / (order - 1)


def compose(
    ledger: PrivacyLedger, orders: Sequence[int] = DEFAULT_ORDERS
) -> RdpCurve:
    """Cumulative curve: log-moments add across composed steps."""
    values = np.zeros(len(orders))
    for entry in ledger.entries:
        for i, order in enumerate(orders):
            values[i] += entry.steps * rdp_subsampled_gaussian(entry.q, entry.sigma, order)
    return RdpCurve(tuple(int(o) for o in orders), values)


def epsilon(curve: RdpCurve, delta: float) -> tuple[float, int]:
    """Smallest epsilon over orders for the given delta, plus its order.

    An all-zero curve (nothing composed, or identical mechanisms) is exactly
    epsilon = 0; the generic conversion bound is not tight there.
    """
    if not (0.0 < delta < 1.0):
        raise AccountingError("delta must lie in (0, 1)")
    if len(curve.orders) == 0:
        raise AccountingError("empty RDP curve")
    if not np.any(curve.values):
        return 0.0, curve.orders[0]
    log_inv_delta = math.log(1.0 / delta)
    candidates = [
        rdp + log_inv_delta / (order - 1)
        for order, rdp in zip(curve.orders, curve.values)
    ]
    best = int(np.argmin(candidates))
    return float(candidates[best]), curve.orders[best]


def group_rescale(eps: float, gamma: int) -> float:
    """Per-contributor guarantee for up to gamma sentences per contributor."""
    if gamma < 1:
        raise AccountingError("gamma must be a positive integer")
    return eps / gamma


def compute_epsilon(
    q: float,
    sigma: float,
    steps: int,
    delta: float,
    orders: Sequence[int] = DEFAULT_ORDERS,
) -> tuple[float, int]:
    """Epsilon of `steps` identical subsampled Gaussian steps."""
    ledger = PrivacyLedger()
    ledger.record(q, sigma, steps)
    return epsilon(compose(ledger, orders), delta)


def calibrate_sigma(
    target_epsilon: float,
    delta: float,
    q: float,
    steps: int,
    sigma_min: float = 1e-2,
    sigma_max: float = 1e3,
    tol: float = 1e-3,
) -> float:
    """Smallest noise multiplier meeting `target_epsilon` via bisection.

    Valid because epsilon is strictly decreasing in sigma for fixed
    (q, steps, delta).
    """
    if target_epsilon <= 0.0:
        raise AccountingError("target epsilon must be positive")

    def eps_at(sigma: float) -> float:
        return compute_epsilon(q, sigma, steps, delta)[0]

    if eps_at(sigma_max) > target_epsilon:
        raise AccountingError("target epsilon unreachable")
    if eps_at(sigma_min) <= target_epsilon:
        return sigma_min
    lo, hi = sigma_min, sigma_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def epsilon_curve(
    q: float,
    steps: int,
    sigmas: Iterable[float],
    deltas: Iterable[float],
    orders: Sequence[int] = DEFAULT_ORDERS,
) -> list[tuple[float, float, float]]:
    """(sigma, delta, epsilon) rows sweeping noise scales and deltas."""
    rows = []
    for sigma in sigmas:
        curve = compose_single(q, sigma, steps, orders)
        for delta in deltas:
            eps, _ = epsilon(curve, delta)
            rows.append((sigma, delta, eps))
    return rows


def compose_single(
    q: float, sigma: float, steps: int, orders: Sequence[int] = DEFAULT_ORDERS
) -> RdpCurve:
    ledger = PrivacyLedger()
    ledger.record(q, sigma, steps)
    return compose(ledger, orders)
