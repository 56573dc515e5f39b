"""Choosing which activation blocks fall back, and the delayed threshold controller."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .matrix import GroupGeometry, blocked, dense
from .quant import dequantize, quantize_rtn


class FallbackCriterion(str, enum.Enum):
    ABSMAX = "absmax"
    L1 = "l1"
    L1_REL = "l1rel"


def score_blocks(m, g: GroupGeometry, bits: int, criterion=FallbackCriterion.ABSMAX) -> np.ndarray:
    """Per-block score on the block grid of ``m``.

    AbsMax is the block's max magnitude, L1 is the summed absolute error of
    round-to-nearest quantization at ``bits``, and L1-Rel divides L1 by the
    block's summed magnitude (zero blocks score 0).
    """
    criterion = FallbackCriterion(criterion)
    m = dense(m)
    mag = np.abs(blocked(m, g))
    if criterion is FallbackCriterion.ABSMAX:
        return mag.max(axis=(1, 3)).astype(np.float64)
    err = np.abs(m.astype(np.float64) - dequantize(quantize_rtn(m, g, bits), np.float64))
    l1 = blocked(err, g).sum(axis=(1, 3))
    if criterion is FallbackCriterion.L1:
        return l1
    total = mag.astype(np.float64).sum(axis=(1, 3))
    return np.divide(l1, total, out=np.zeros_like(l1), where=total > 0)


def mask_topk(scores, rate: float) -> np.ndarray:
    """The ``ceil(rate * n)`` highest-scoring blocks; ties go to the lower linear index."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    scores = np.asarray(scores, dtype=np.float64)
    k = math.ceil(rate * scores.size)
    flat = np.zeros(scores.size, dtype=bool)
    if k:
        # stable sort on the negated scores keeps equal scores in index order
        flat[np.argsort(-scores.ravel(), kind="stable")[:k]] = True
    return flat.reshape(scores.shape)


def mask_threshold(scores, threshold: float) -> np.ndarray:
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return np.asarray(scores) > threshold


@dataclass(frozen=True)
class ControllerConfig:
    r_min: float = 0.1
    r_max: float = 0.3
    alpha: float = 1.3

    def __post_init__(self):
        if not 0.0 <= self.r_min < self.r_max <= 1.0:
            raise ValueError(f"need 0 <= r_min < r_max <= 1, got [{self.r_min}, {self.r_max}]")
        if not self.alpha > 1.0:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")


@dataclass(frozen=True)
class FallbackThresholdState:
    threshold: float = 1.0
    last_rate: float = 0.0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")


def controller_update(
    state: FallbackThresholdState, observed_rate: float, cfg: ControllerConfig = ControllerConfig()
) -> FallbackThresholdState:
    """One delayed-threshold step: divide by alpha below ``r_min``, multiply above ``r_max``."""
    if not 0.0 <= observed_rate <= 1.0:
        raise ValueError(f"observed rate must be in [0, 1], got {observed_rate}")
    theta = state.threshold
    if observed_rate < cfg.r_min:
        theta = theta / cfg.alpha
    elif observed_rate > cfg.r_max:
        theta = theta * cfg.alpha
    return replace(state, threshold=theta, last_rate=observed_rate)


def steps_to_reach(theta0: float, theta_target: float, alpha: float) -> int:
    """Bound on controller updates needed to move from ``theta0`` to the range around ``theta_target``."""
    n = abs(math.log(theta0 / theta_target) / math.log(alpha))
    # exact powers of alpha should not pick up an extra step from log rounding
    return math.ceil(n - 1e-9) + 1
