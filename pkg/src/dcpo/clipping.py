"""Ratio clipping bounds: fixed, asymmetric, dynamic-adaptive and sequence-level.

Dynamic-adaptive bounds come from constraining the probability-weighted ratio
deviation ``|(r - 1) * r * q| <= eps`` for a token whose old-policy
probability is ``q``. Solving the quadratic in ``r`` gives

    lower(q) = 0.5 + 0.5 * sqrt(max(1 - 4 * eps_low / q, 0))
    upper(q) = min(0.5 + 0.5 * sqrt(1 + 4 * eps_high / q), r_max)

so rare tokens get a wider admissible interval while confident tokens keep an
interval close to the fixed ``[1 - eps, 1 + eps]`` one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ClipMode",
    "DualClip",
    "ClipConfig",
    "ClipBounds",
    "BoundRow",
    "Q_FLOOR",
    "dynamic_bounds",
    "fixed_bounds",
    "bounds_for",
    "calibrate_thresholds",
    "ceiling_threshold",
    "bound_curve",
]

# q == 0 can only come from underflow of exp(logp_old); the r_max ceiling makes
# the result insensitive to the exact floor.
Q_FLOOR = 1e-12


class ClipMode(str, enum.Enum):
    FIXED_SYMMETRIC = "fixed"
    FIXED_ASYMMETRIC = "asymmetric"
    DYNAMIC_ADAPTIVE = "dynamic"
    SEQUENCE_LEVEL = "sequence"


class DualClip(str, enum.Enum):
    """Which advantage signs get the hard ``r_max`` ratio ceiling."""

    NONE = "none"
    NEGATIVE = "negative"
    BOTH = "both"


@dataclass(frozen=True)
class ClipConfig:
    """Clipping mode and thresholds.

    ``eps_low``/``eps_high`` are probability-weighted slacks in dynamic mode and
    plain ratio offsets in the asymmetric and sequence-level modes.
    """

    mode: ClipMode = ClipMode.DYNAMIC_ADAPTIVE
    eps: float = 0.2
    eps_low: float = 0.16
    eps_high: float = 0.2
    r_max: float = 10.0
    dual_clip: DualClip = DualClip.BOTH

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", ClipMode(self.mode))
        object.__setattr__(self, "dual_clip", DualClip(self.dual_clip))
        for name in ("eps", "eps_low", "eps_high", "r_max"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value!r}")
        if self.r_max <= 1:
            raise ValueError(f"r_max must exceed 1, got {self.r_max!r}")
        if self.mode is ClipMode.FIXED_SYMMETRIC:
            if self.eps > 1:
                raise ValueError(f"eps={self.eps} gives a negative lower bound")
            if 1 + self.eps > self.r_max:
                raise ValueError("fixed upper bound exceeds r_max")
        elif self.mode in (ClipMode.FIXED_ASYMMETRIC, ClipMode.SEQUENCE_LEVEL):
            if self.eps_low >= 1:
                raise ValueError(f"eps_low={self.eps_low} gives a non-positive lower bound")
            if 1 + self.eps_high > self.r_max:
                raise ValueError("fixed upper bound exceeds r_max")

    @classmethod
    def grpo(cls, eps: float = 0.2) -> "ClipConfig":
        return cls(mode=ClipMode.FIXED_SYMMETRIC, eps=eps, dual_clip=DualClip.NONE)

    @classmethod
    def dapo(cls, eps_low: float = 0.2, eps_high: float = 0.28, r_max: float = 10.0) -> "ClipConfig":
        return cls(
            mode=ClipMode.FIXED_ASYMMETRIC,
            eps_low=eps_low,
            eps_high=eps_high,
            r_max=r_max,
            dual_clip=DualClip.NEGATIVE,
        )

    @classmethod
    def gspo(cls, eps_low: float = 3e-4, eps_high: float = 4e-4) -> "ClipConfig":
        return cls(
            mode=ClipMode.SEQUENCE_LEVEL,
            eps_low=eps_low,
            eps_high=eps_high,
            dual_clip=DualClip.NONE,
        )

    @classmethod
    def dcpo(cls, eps_low: float = 0.16, eps_high: float = 0.2, r_max: float = 10.0) -> "ClipConfig":
        return cls(
            mode=ClipMode.DYNAMIC_ADAPTIVE,
            eps_low=eps_low,
            eps_high=eps_high,
            r_max=r_max,
            dual_clip=DualClip.BOTH,
        )

    def ceiling_for(self, adv_sign: int) -> float | None:
        """Ratio ceiling applied to tokens with advantage of the given sign."""
        if self.dual_clip is DualClip.BOTH and adv_sign != 0:
            return self.r_max
        if self.dual_clip is DualClip.NEGATIVE and adv_sign < 0:
            return self.r_max
        return None


@dataclass(frozen=True)
class ClipBounds:
    """Admissible ratio interval. Fields are floats, or arrays when ``q`` was an array."""

    lower: float | np.ndarray
    upper: float | np.ndarray


def _check_q(q: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(q)):
        raise ValueError("old-policy probability must be finite")
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("old-policy probability must lie in (0, 1]")
    return np.maximum(q, Q_FLOOR)


def dynamic_bounds(q, cfg: ClipConfig) -> ClipBounds:
    """Dynamic-adaptive bounds for old-policy token probability ``q``.

    ``q`` may be a scalar or an array; the result mirrors its shape.
    """
    if cfg.mode is not ClipMode.DYNAMIC_ADAPTIVE:
        raise ValueError(f"dynamic_bounds needs dynamic mode, got {cfg.mode.value}")
    scalar = np.ndim(q) == 0
    qa = _check_q(np.asarray(q, dtype=np.float64))
    lower = 0.5 + 0.5 * np.sqrt(np.maximum(1.0 - 4.0 * cfg.eps_low / qa, 0.0))
    upper = np.minimum(0.5 + 0.5 * np.sqrt(1.0 + 4.0 * cfg.eps_high / qa), cfg.r_max)
    if scalar:
        return ClipBounds(float(lower), float(upper))
    return ClipBounds(lower, upper)


def fixed_bounds(cfg: ClipConfig) -> ClipBounds:
    if cfg.mode is ClipMode.FIXED_SYMMETRIC:
        lower, upper = 1.0 - cfg.eps, 1.0 + cfg.eps
    elif cfg.mode in (ClipMode.FIXED_ASYMMETRIC, ClipMode.SEQUENCE_LEVEL):
        lower, upper = 1.0 - cfg.eps_low, 1.0 + cfg.eps_high
    else:
        raise ValueError(f"fixed_bounds needs a fixed mode, got {cfg.mode.value}")
    if lower < 0:
        raise ValueError(f"lower bound {lower} is negative")
    return ClipBounds(lower, upper)


def bounds_for(q, cfg: ClipConfig) -> ClipBounds:
    """Bounds under any mode; fixed modes broadcast to the shape of ``q``."""
    if cfg.mode is ClipMode.DYNAMIC_ADAPTIVE:
        return dynamic_bounds(q, cfg)
    fb = fixed_bounds(cfg)
    if np.ndim(q) == 0:
        return fb
    shape = np.shape(q)
    return ClipBounds(np.full(shape, fb.lower), np.full(shape, fb.upper))


def calibrate_thresholds(eps: float) -> tuple[float, float]:
    """Dynamic thresholds whose bounds pass through the fixed-eps anchor points.

    The anchors are ``(q, r) = (1, 1 - eps)`` for the lower bound and
    ``(1 / (1 + eps), 1 + eps)`` for the upper one, which solve to
    ``eps_low = eps * (1 - eps)`` and ``eps_high = eps``. The lower anchor is
    only reachable while ``1 - eps >= 0.5``.
    """
    if not math.isfinite(eps) or eps <= 0 or eps >= 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps!r}")
    if eps > 0.5:
        raise ValueError(f"eps={eps} puts the lower anchor below the 0.5 floor of the dynamic bound")
    return eps * (1.0 - eps), eps


def ceiling_threshold(cfg: ClipConfig) -> float:
    """Largest ``q`` at which the dynamic upper bound is capped at ``r_max``."""
    return 4.0 * cfg.eps_high / ((2.0 * cfg.r_max - 1.0) ** 2 - 1.0)


@dataclass(frozen=True)
class BoundRow:
    q: float
    lower: float
    upper: float
    mode: str


def bound_curve(cfg: ClipConfig, q_grid: Iterable[float]) -> list[BoundRow]:
    qs: Sequence[float] = [float(q) for q in q_grid]
    if not qs:
        return []
    if any(not (0 < q <= 1) for q in qs):
        raise ValueError("grid probabilities must lie in (0, 1]")
    b = bounds_for(np.asarray(qs), cfg)
    lower = np.broadcast_to(b.lower, (len(qs),))
    upper = np.broadcast_to(b.upper, (len(qs),))
    return [
        BoundRow(q, float(lo), float(hi), cfg.mode.value)
        for q, lo, hi in zip(qs, lower, upper)
    ]
