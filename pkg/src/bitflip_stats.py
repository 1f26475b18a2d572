"""
Bernoulli bitflip model.

Each bit flips independently with probability p, so a unit of L exposed
bits is corrupted with probability 1 - (1-p)^L. From the number of corrupted
units we solve for p, bound it with Hoeffding (or Chebyshev) and predict how
many units carry k flips.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, stats

from config import settings
from errors import StatsError
from models import RateModel

logger = logging.getLogger(__name__)

LENGTH_UNITS = ("bits", "bytes")


def exposure(lengths: Iterable[int], length_unit: str = "bits") -> np.ndarray:
    """Exponent per unit: 8 x bytes for the bit reading, bytes for the byte reading."""
    if length_unit not in LENGTH_UNITS:
        raise StatsError(f"length unit must be one of {LENGTH_UNITS}, got {length_unit!r}")
    arr = np.asarray(list(lengths), dtype=np.float64)
    if arr.size == 0:
        raise StatsError("no unit lengths given")
    if (arr <= 0).any():
        raise StatsError("unit lengths must be positive")
    return arr * 8 if length_unit == "bits" else arr


def _expected_corrupted(p: float, exps: np.ndarray) -> float:
    with np.errstate(divide="ignore"):
        survive = np.exp(exps * np.log1p(-p)) if p < 1.0 else np.zeros_like(exps)
    return float((1.0 - survive).sum())


def estimate_rate(lengths: Sequence[int], corrupted: float, length_unit: str = "bits") -> float:
    """The p in [0, 1] whose expected corrupted-unit count equals `corrupted`."""
    exps = exposure(lengths, length_unit)
    n = exps.size
    if corrupted < 0 or corrupted > n:
        raise StatsError(f"{corrupted} corrupted units out of {n} is impossible")
    if corrupted == 0:
        return 0.0
    if corrupted == n:
        return 1.0
    return float(optimize.bisect(
        lambda p: _expected_corrupted(p, exps) - corrupted,
        0.0, 1.0, xtol=1e-300, rtol=1e-12, maxiter=2000,
    ))


def hoeffding_t(n: int, tail_prob: float) -> float:
    """Solves 2 exp(-2 t^2 / n) = tail_prob for t."""
    if n < 1:
        raise StatsError("need at least one unit")
    if not 0 < tail_prob <= 2:
        raise StatsError(f"tail probability {tail_prob} outside (0, 2]")
    return math.sqrt(n * math.log(2.0 / tail_prob) / 2.0)


def rate_interval(lengths: Sequence[int], corrupted: float, t: float,
                  length_unit: str = "bits") -> Tuple[float, float]:
    n = len(lengths)
    lo = estimate_rate(lengths, min(n, max(0.0, corrupted - t)), length_unit)
    hi = estimate_rate(lengths, min(n, max(0.0, corrupted + t)), length_unit)
    return lo, hi


def expected_k_flip_count(lengths: Sequence[int], p: float, k: int, length_unit: str = "bits") -> float:
    """Expected number of units carrying exactly k flips."""
    if k < 0:
        raise StatsError("k must be non-negative")
    exps = exposure(lengths, length_unit)
    return float(stats.binom.pmf(k, exps.astype(np.int64), p).sum())


def corrupted_variance(lengths: Sequence[int], p: float, length_unit: str = "bits") -> float:
    """Variance of the corrupted-unit count: sum of q(1-q) over units."""
    exps = exposure(lengths, length_unit)
    q = 1.0 - np.exp(exps * np.log1p(-p)) if p < 1.0 else np.ones_like(exps)
    return float((q * (1.0 - q)).sum())


def chebyshev_t(lengths: Sequence[int], p: float, tail_prob: float, length_unit: str = "bits") -> float:
    """Deviation t with Var / t^2 = tail_prob; a looser alternative to Hoeffding."""
    if not 0 < tail_prob <= 1:
        raise StatsError(f"tail probability {tail_prob} outside (0, 1]")
    return math.sqrt(corrupted_variance(lengths, p, length_unit) / tail_prob)


def bytes_per_flip(p: float) -> Optional[float]:
    return 1.0 / (8.0 * p) if p > 0 else None


@dataclass(frozen=True)
class RateEstimate:
    p: float
    p_lo: float
    p_hi: float
    confidence: float
    t: float
    fragments: int
    corrupted: int
    length_unit: str = "bits"
    expected_counts: Dict[int, float] = field(default_factory=dict)
    chebyshev_t: Optional[float] = None
    chebyshev_interval: Optional[Tuple[float, float]] = None

    @property
    def bytes_per_flip(self) -> Optional[float]:
        return bytes_per_flip(self.p)

    def to_model(self) -> RateModel:
        return RateModel(
            fragments=self.fragments,
            corrupted=self.corrupted,
            length_unit=self.length_unit,
            p=self.p,
            p_lo=self.p_lo,
            p_hi=self.p_hi,
            t=self.t,
            confidence=self.confidence,
            bytes_per_flip=self.bytes_per_flip,
            # larger p means fewer bytes between flips
            bytes_per_flip_range=(bytes_per_flip(self.p_hi), bytes_per_flip(self.p_lo)),
            expected_counts={str(k): v for k, v in self.expected_counts.items()},
            chebyshev_t=self.chebyshev_t,
            chebyshev_interval=self.chebyshev_interval,
        )


def summarize(lengths: Sequence[int], corrupted: int, tail_prob: Optional[float] = None,
              length_unit: Optional[str] = None, ks: Iterable[int] = (0, 1, 2, 3)) -> RateEstimate:
    """Point estimate, Hoeffding interval (t rounded up), Chebyshev interval and k-flip expectations."""
    tail_prob = settings.TAIL_PROB if tail_prob is None else tail_prob
    length_unit = length_unit or settings.LENGTH_UNIT

    p = estimate_rate(lengths, corrupted, length_unit)
    t = float(math.ceil(hoeffding_t(len(lengths), tail_prob)))
    p_lo, p_hi = rate_interval(lengths, corrupted, t, length_unit)

    cheb_t = cheb_interval = None
    if tail_prob <= 1:
        cheb_t = chebyshev_t(lengths, p, tail_prob, length_unit)
        cheb_interval = rate_interval(lengths, corrupted, cheb_t, length_unit)

    expected = {k: expected_k_flip_count(lengths, p, k, length_unit) for k in ks}
    logger.info(
        f"[estimate] {corrupted}/{len(lengths)} corrupted units, p={p:.3e} "
        f"in [{p_lo:.3e}, {p_hi:.3e}] (t={t:.0f}, unit={length_unit})"
    )
    return RateEstimate(
        p=p, p_lo=p_lo, p_hi=p_hi, confidence=max(0.0, 1.0 - tail_prob),
        t=t, fragments=len(lengths), corrupted=corrupted, length_unit=length_unit,
        expected_counts=expected, chebyshev_t=cheb_t, chebyshev_interval=cheb_interval,
    )
