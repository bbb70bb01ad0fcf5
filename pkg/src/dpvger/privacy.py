"""Gaussian mechanism on clipped per-example gradients and its RDP accountant.

Accounting assumptions, repeated verbatim in every privacy report:

* adjacency is add/remove of one example;
* batches are drawn by shuffling but accounted as Poisson sampling at rate q;
* only integer Renyi orders are used.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.special import gammaln, logsumexp

from dpvger.config import ClippingMode
from dpvger.errors import (
    BudgetInfeasibleError,
    PrivacyError,
    PrivacyErrorCode,
)
from dpvger.nn import PerExampleGrads
from dpvger.rng import RngState

DEFAULT_ORDERS: Tuple[int, ...] = tuple(range(2, 65)) + (128, 256)
SIGMA_SEARCH_FLOOR = 1e-3
SIGMA_SEARCH_CEILING = 1e6
SIGMA_RELATIVE_TOLERANCE = 1e-4

ACCOUNTING_DISCLOSURE = (
    "adjacency=add/remove one example; "
    "batches are shuffled but accounted as Poisson sampling at rate q; "
    "integer Renyi orders; "
    "clipping is per-example l2 (global or per-layer), not per-parameter"
)


def clip(
    grads: PerExampleGrads,
    clip_norm: float,
    mode: ClippingMode = ClippingMode.GLOBAL,
) -> PerExampleGrads:
    """Scale each example's gradient to l2 norm at most ``clip_norm``.

    ``per_layer`` clips every layer block to ``clip_norm / sqrt(L)`` so the whole
    vector still stays within ``clip_norm``.
    """
    if not clip_norm > 0:
        raise PrivacyError(
            f"clip norm must be positive, got {clip_norm}",
            code=PrivacyErrorCode.INVALID_NOISE,
        )
    if mode is ClippingMode.PER_LAYER:
        slices = grads.layer_slices()
        bound = clip_norm / math.sqrt(len(slices))
        clipped = grads.vectors.copy()
        for block in slices:
            clipped[:, block] = _clip_rows(grads.vectors[:, block], bound)
        return PerExampleGrads(vectors=clipped, shapes=grads.shapes)
    return PerExampleGrads(
        vectors=_clip_rows(grads.vectors, clip_norm), shapes=grads.shapes
    )


def _clip_rows(rows: np.ndarray, bound: float) -> np.ndarray:
    norms = np.sqrt(np.sum(rows * rows, axis=1))
    ratio = np.divide(bound, norms, out=np.ones_like(norms), where=norms > 0)
    return rows * np.minimum(1.0, ratio)[:, None]


def privatize(
    clipped: PerExampleGrads, clip_norm: float, sigma: float, rng: RngState
) -> np.ndarray:
    """Noisy mean ``(sum_i g_i + N(0, sigma^2 C^2 I)) / batch``.

    No noise is drawn when ``sigma == 0``, so the RNG stream is left untouched.
    """
    if sigma < 0:
        raise PrivacyError(
            f"noise multiplier must be >= 0, got {sigma}",
            code=PrivacyErrorCode.INVALID_NOISE,
        )
    total = clipped.total()
    if sigma > 0:
        if math.isinf(clip_norm):
            raise PrivacyError(
                "noise needs a finite clip norm", code=PrivacyErrorCode.INVALID_NOISE
            )
        total = total + rng.normal_vector(total.size) * (sigma * clip_norm)
    return total / clipped.batch_size


def _log_comb(n: int, k: np.ndarray) -> np.ndarray:
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """Integer-order RDP of the Poisson-subsampled Gaussian mechanism."""
    if isinstance(alpha, bool) or int(alpha) != alpha or alpha < 2:
        raise PrivacyError(
            f"RDP order must be an integer >= 2, got {alpha}",
            code=PrivacyErrorCode.INVALID_ORDER,
        )
    if not sigma > 0:
        raise PrivacyError(
            f"noise multiplier must be positive, got {sigma}",
            code=PrivacyErrorCode.INVALID_NOISE,
        )
    if not 0 < q <= 1:
        raise PrivacyError(
            f"sampling fraction must lie in (0, 1], got {q}",
            code=PrivacyErrorCode.INVALID_NOISE,
        )
    alpha = int(alpha)
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        _log_comb(alpha, k)
        + (alpha - k) * math.log1p(-q)
        + k * math.log(q)
        + k * (k - 1.0) / (2.0 * sigma**2)
    )
    return max(0.0, float(logsumexp(log_terms)) / (alpha - 1))


@lru_cache(maxsize=4096)
def _single_step_curve(q: float, sigma: float, orders: Tuple[int, ...]) -> Tuple[float, ...]:
    if sigma == 0:
        return tuple(math.inf for _ in orders)
    return tuple(rdp_subsampled_gaussian(q, sigma, order) for order in orders)


@dataclass(frozen=True)
class LedgerEntry:
    q: float
    sigma: float
    steps: int = 1


@dataclass
class PrivacyLedger:
    """Append-only record of noisy mechanism calls for one budget domain."""

    domain: str
    entries: List[LedgerEntry] = field(default_factory=list)
    _lock: threading.Lock = field(
        default_factory=threading.Lock, init=False, repr=False, compare=False
    )

    def record(self, q: float, sigma: float, steps: int = 1) -> LedgerEntry:
        if steps < 1:
            raise PrivacyError(f"step count must be positive, got {steps}")
        if not 0 < q <= 1 or sigma < 0:
            raise PrivacyError(
                f"invalid mechanism parameters q={q}, sigma={sigma}",
                code=PrivacyErrorCode.INVALID_NOISE,
            )
        entry = LedgerEntry(q=float(q), sigma=float(sigma), steps=int(steps))
        with self._lock:
            self.entries.append(entry)
        return entry

    def snapshot(self) -> Tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self.entries)

    @property
    def total_steps(self) -> int:
        return sum(entry.steps for entry in self.snapshot())

    def extend(self, other: "PrivacyLedger") -> None:
        if other.domain != self.domain:
            raise PrivacyError(
                f"cannot merge ledger {other.domain!r} into {self.domain!r}",
                code=PrivacyErrorCode.DOMAIN_CONFLICT,
            )
        for entry in other.snapshot():
            self.record(entry.q, entry.sigma, entry.steps)

    def epsilon(self, delta: float, orders: Sequence[int] = DEFAULT_ORDERS) -> float:
        return to_eps_delta(compose(self, orders), delta)[0]

    def projected_epsilon(
        self,
        q: float,
        sigma: float,
        delta: float,
        extra_steps: int = 1,
        orders: Sequence[int] = DEFAULT_ORDERS,
    ) -> float:
        """Epsilon after ``extra_steps`` more calls at ``(q, sigma)``."""
        current = compose(self, orders)
        step = np.array(_single_step_curve(float(q), float(sigma), current.orders))
        projected = RdpCurve(orders=current.orders, values=current.values + extra_steps * step)
        return to_eps_delta(projected, delta)[0]


@dataclass(frozen=True)
class RdpCurve:
    orders: Tuple[int, ...]
    values: np.ndarray


def compose(
    ledger: PrivacyLedger | Iterable[LedgerEntry],
    orders: Sequence[int] = DEFAULT_ORDERS,
) -> RdpCurve:
    """Additive RDP composition; identical (q, sigma) entries are grouped first."""
    entries = ledger.snapshot() if isinstance(ledger, PrivacyLedger) else tuple(ledger)
    order_key = tuple(int(order) for order in orders)
    counts: Dict[Tuple[float, float], int] = {}
    for entry in entries:
        key = (entry.q, entry.sigma)
        counts[key] = counts.get(key, 0) + entry.steps
    values = np.zeros(len(order_key), dtype=np.float64)
    for (q, sigma), count in counts.items():
        values = values + count * np.array(_single_step_curve(q, sigma, order_key))
    return RdpCurve(orders=order_key, values=values)


def to_eps_delta(curve: RdpCurve, delta: float) -> Tuple[float, int]:
    """Smallest ``RDP(a) + log(1/delta)/(a-1)`` over the curve's orders."""
    if not curve.orders:
        raise PrivacyError("RDP curve has no orders", code=PrivacyErrorCode.EMPTY_CURVE)
    if not 0 < delta < 1:
        raise PrivacyError(f"delta must lie in (0, 1), got {delta}")
    if not np.any(curve.values):
        return 0.0, max(curve.orders)
    orders = np.array(curve.orders, dtype=np.float64)
    eps = curve.values + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(eps))
    return float(eps[best]), curve.orders[best]


def to_delta(curve: RdpCurve, epsilon: float) -> Tuple[float, int]:
    """Smallest ``exp((a-1)(RDP(a) - epsilon))`` over the orders, capped at 1."""
    if not curve.orders:
        raise PrivacyError("RDP curve has no orders", code=PrivacyErrorCode.EMPTY_CURVE)
    if epsilon < 0:
        raise PrivacyError(f"epsilon must be >= 0, got {epsilon}")
    if not np.any(curve.values):
        return 0.0, max(curve.orders)
    orders = np.array(curve.orders, dtype=np.float64)
    with np.errstate(over="ignore"):
        log_delta = (orders - 1.0) * (curve.values - epsilon)
    best = int(np.argmin(log_delta))
    return float(min(1.0, math.exp(min(0.0, log_delta[best])))), curve.orders[best]


def _epsilon_for_sigma(
    sigma: float, delta: float, q: float, steps: int, orders: Tuple[int, ...]
) -> float:
    curve = RdpCurve(orders=orders, values=steps * np.array(_single_step_curve(q, sigma, orders)))
    return to_eps_delta(curve, delta)[0]


def calibrate_sigma(
    target_epsilon: float,
    delta: float,
    q: float,
    steps: int,
    orders: Sequence[int] = DEFAULT_ORDERS,
) -> float:
    """Smallest noise multiplier whose composed epsilon stays within the target.

    Bisects geometrically until the bracket is within 1e-4 relative and returns
    the feasible end of the bracket.
    """
    if not target_epsilon > 0:
        raise PrivacyError(f"target epsilon must be positive, got {target_epsilon}")
    if steps < 1:
        raise PrivacyError(f"planned steps must be positive, got {steps}")
    order_key = tuple(int(order) for order in orders)
    q = float(q)
    if _epsilon_for_sigma(SIGMA_SEARCH_CEILING, delta, q, steps, order_key) > target_epsilon:
        raise BudgetInfeasibleError(
            f"no sigma <= {SIGMA_SEARCH_CEILING:g} reaches epsilon={target_epsilon} "
            f"at delta={delta} with q={q} over {steps} steps"
        )
    lo, hi = SIGMA_SEARCH_FLOOR, SIGMA_SEARCH_CEILING
    if _epsilon_for_sigma(lo, delta, q, steps, order_key) <= target_epsilon:
        return lo
    while hi / lo - 1.0 > SIGMA_RELATIVE_TOLERANCE:
        mid = math.sqrt(lo * hi)
        if _epsilon_for_sigma(mid, delta, q, steps, order_key) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def merge_segments(ledgers: Iterable[PrivacyLedger]) -> Dict[str, PrivacyLedger]:
    """Merge ledger segments that share a domain; distinct domains stay apart."""
    merged: Dict[str, PrivacyLedger] = {}
    for ledger in ledgers:
        target = merged.get(ledger.domain)
        if target is None:
            target = merged[ledger.domain] = PrivacyLedger(domain=ledger.domain)
        target.extend(ledger)
    return merged


class PrivacyReportEntry(BaseModel):
    """Spent budget of one class GAN."""

    domain: str
    task_id: int
    label: int
    q: float
    sigma: float
    clip_norm: float
    steps: int
    delta: float
    epsilon: float
    order: int
    target_epsilon: Optional[float] = None
    clipping_mode: ClippingMode = ClippingMode.GLOBAL
    halted_at_budget: bool = False


def report_entry(
    ledger: PrivacyLedger,
    *,
    task_id: int,
    label: int,
    clip_norm: float,
    delta: float,
    target_epsilon: Optional[float],
    clipping_mode: ClippingMode,
    halted_at_budget: bool = False,
    orders: Sequence[int] = DEFAULT_ORDERS,
) -> PrivacyReportEntry:
    entries = ledger.snapshot()
    last = entries[-1] if entries else LedgerEntry(q=1.0, sigma=0.0, steps=0)
    epsilon, order = to_eps_delta(compose(ledger, orders), delta)
    return PrivacyReportEntry(
        domain=ledger.domain,
        task_id=task_id,
        label=label,
        q=last.q,
        sigma=last.sigma,
        clip_norm=clip_norm,
        steps=sum(entry.steps for entry in entries),
        delta=delta,
        epsilon=epsilon,
        order=order,
        target_epsilon=target_epsilon,
        clipping_mode=clipping_mode,
        halted_at_budget=halted_at_budget,
    )


def format_privacy_report(entries: Sequence[PrivacyReportEntry]) -> str:
    lines = [f"# accounting: {ACCOUNTING_DISCLOSURE}"]
    if not entries:
        lines.append("# no differentially private mechanism was run")
    for entry in entries:
        lines.append("")
        lines.append(f"[{entry.domain}]")
        for key in (
            "task_id",
            "label",
            "q",
            "sigma",
            "clip_norm",
            "steps",
            "delta",
            "epsilon",
            "order",
            "target_epsilon",
            "clipping_mode",
            "halted_at_budget",
        ):
            value = getattr(entry, key)
            if isinstance(value, ClippingMode):
                value = value.value
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
