"""Reward standardization: per-step, cumulative per prompt, and the smoothed blend.

Per-prompt statistics are kept as two pooled summaries (the latest group and
everything before it) so no raw reward history is ever stored.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

__all__ = [
    "PromptStats",
    "AdvantageBundle",
    "prompt_key",
    "step_standardize",
    "cumulative_standardize",
    "update_stats",
    "pooled_total",
    "smooth_and_select",
    "sas_advantages",
]


def prompt_key(prompt: Sequence[int]) -> str:
    """Stable identifier derived from prompt content."""
    raw = ",".join(str(int(t)) for t in prompt).encode()
    return hashlib.sha1(raw).hexdigest()[:16]


@dataclass(frozen=True)
class PromptStats:
    """Running reward statistics for one prompt.

    ``i`` counts groups generated for the prompt. ``*_new`` describe the latest
    group (``n_new`` rewards), ``*_old`` pool every earlier group (``n_old``
    rewards). All standard deviations are population (divide-by-count).
    """

    prompt_id: str = ""
    i: int = 0
    mu_new: float = 0.0
    sigma_new: float = 0.0
    n_new: int = 0
    mu_old: float = 0.0
    sigma_old: float = 0.0
    n_old: int = 0


@dataclass(frozen=True)
class AdvantageBundle:
    rewards: np.ndarray
    a_new: np.ndarray
    a_total: np.ndarray
    sa_new: np.ndarray
    sa_total: np.ndarray
    selected: np.ndarray

    @property
    def nonzero(self) -> np.ndarray:
        return np.abs(self.selected) > 0


def _as_rewards(rewards) -> np.ndarray:
    arr = np.asarray(rewards, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("rewards must be one-dimensional")
    return arr


def _standardize(r: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    # sigma == 0 gives zeros rather than an epsilon-floored division
    if sigma == 0:
        return np.zeros_like(r)
    return (r - mu) / sigma


def step_standardize(rewards) -> np.ndarray:
    r = _as_rewards(rewards)
    if r.size < 2:
        raise ValueError(f"group size must be at least 2, got {r.size}")
    return _standardize(r, float(r.mean()), float(r.std()))


def _pool(mu_a: float, var_a: float, n_a: int, mu_b: float, var_b: float, n_b: int):
    n = n_a + n_b
    if n_b == 0:
        return mu_a, var_a, n_a
    if n_a == 0:
        return mu_b, var_b, n_b
    delta = mu_b - mu_a
    mu = (n_a * mu_a + n_b * mu_b) / n
    var = (n_a * var_a + n_b * var_b + (n_a * n_b / n) * delta * delta) / n
    return mu, max(var, 0.0), n


def pooled_total(stats: PromptStats) -> tuple[float, float]:
    """Mean and population std over every reward recorded for the prompt.

    With a constant group size this is
    ``mu = (mu_new + (i - 1) mu_old) / i`` and
    ``var = (s_new^2 + (i - 1) s_old^2 + (i - 1) / i (mu_old - mu_new)^2) / i``.
    """
    if stats.i < 1:
        raise RuntimeError("prompt has no recorded groups")
    mu, var, _ = _pool(
        stats.mu_old, stats.sigma_old**2, stats.n_old,
        stats.mu_new, stats.sigma_new**2, stats.n_new,
    )
    return mu, math.sqrt(var)


def update_stats(stats: PromptStats, rewards) -> PromptStats:
    r = _as_rewards(rewards)
    if r.size == 0:
        raise ValueError("empty reward group")
    if stats.i >= 1:
        mu_old, sigma_old = pooled_total(stats)
        n_old = stats.n_old + stats.n_new
    else:
        mu_old, sigma_old, n_old = 0.0, 0.0, 0
    return replace(
        stats,
        i=stats.i + 1,
        mu_new=float(r.mean()),
        sigma_new=float(r.std()),
        n_new=int(r.size),
        mu_old=mu_old,
        sigma_old=sigma_old,
        n_old=n_old,
    )


def cumulative_standardize(rewards, stats: PromptStats) -> np.ndarray:
    """Standardize against all rewards seen for this prompt, this group included."""
    if stats.i < 1:
        raise RuntimeError("group not registered: call update_stats first")
    mu, sigma = pooled_total(stats)
    return _standardize(_as_rewards(rewards), mu, sigma)


def smooth_and_select(a_new, a_total, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Blend the two standardizations with step-dependent weights and pick the
    smaller-magnitude blend per response (ties go to the cumulative-weighted one).

    Returns ``(sa_new, sa_total, selected)``.
    """
    if i < 1:
        raise ValueError(f"occurrence index must be >= 1, got {i}")
    an = np.asarray(a_new, dtype=np.float64)
    at = np.asarray(a_total, dtype=np.float64)
    if an.shape != at.shape:
        raise ValueError(f"shape mismatch: {an.shape} vs {at.shape}")
    sa_new = ((i - 1) / i) * an + (1 / i) * at
    sa_total = (1 / i) * an + ((i - 1) / i) * at
    selected = np.where(np.abs(sa_new) < np.abs(sa_total), sa_new, sa_total)
    return sa_new, sa_total, selected


def sas_advantages(rewards, stats: PromptStats) -> tuple[AdvantageBundle, PromptStats]:
    """Full smoothed pipeline for one group: register the group, then standardize."""
    r = _as_rewards(rewards)
    stats = update_stats(stats, r)
    a_new = step_standardize(r)
    a_total = cumulative_standardize(r, stats)
    sa_new, sa_total, selected = smooth_and_select(a_new, a_total, stats.i)
    return AdvantageBundle(r, a_new, a_total, sa_new, sa_total, selected), stats
