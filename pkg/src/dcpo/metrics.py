"""Token clipping ratio and response utilization ratio."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = ["MicrobatchClipCount", "tcr", "rur"]


@dataclass(frozen=True)
class MicrobatchClipCount:
    clipped: int
    total: int

    def __post_init__(self) -> None:
        if self.total < 1 or not 0 <= self.clipped <= self.total:
            raise ValueError(f"invalid clip count {self.clipped}/{self.total}")


def tcr(counts: Iterable[MicrobatchClipCount | tuple[int, int]]) -> float:
    """Mean over microbatches of the clipped-token fraction (not pooled over tokens)."""
    fracs = []
    for c in counts:
        if not isinstance(c, MicrobatchClipCount):
            c = MicrobatchClipCount(*c)
        fracs.append(c.clipped / c.total)
    if not fracs:
        raise RuntimeError("no microbatches to average")
    return sum(fracs) / len(fracs)


def rur(advantages: Sequence[float] | np.ndarray) -> float:
    """Percentage of responses with a nonzero advantage."""
    adv = np.asarray(advantages, dtype=np.float64).ravel()
    if adv.size == 0:
        raise RuntimeError("no responses")
    return 100.0 * np.count_nonzero(np.abs(adv) > 0) / adv.size
