"""Clipped surrogate objectives and their token-level derivatives.

Every loss returns the objective to *maximize* together with
``dJ/dlogp_new`` for each token, which is all a policy needs to back-propagate
(see :func:`dcpo.policy_sim.surrogate_grad`). Four aggregations are provided:

* GRPO: mean over tokens of a response, then mean over the group (SLM).
* DAPO: sum over all tokens divided by the total token count (TLM).
* GSPO: one clipped term per response built on the geometric-mean ratio.
* DCPO: mean over tokens of a response, summed over responses (OTM).

Multi-group batches average the per-group objective for GRPO and GSPO; DAPO
and DCPO aggregate over the whole batch directly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .clipping import ClipBounds, ClipConfig, ClipMode, bounds_for, fixed_bounds

__all__ = [
    "Method",
    "Response",
    "RolloutGroup",
    "FlatBatch",
    "SurrogateResult",
    "flatten",
    "token_ratios",
    "sequence_ratio",
    "clipped_term",
    "clipped_terms",
    "kl_per_token",
    "kl_penalty",
    "loss_grpo",
    "loss_dapo",
    "loss_gspo",
    "loss_dcpo",
    "objective",
]


class Method(str, enum.Enum):
    GRPO = "grpo"
    DAPO = "dapo"
    GSPO = "gspo"
    DCPO = "dcpo"

    def default_clip(self) -> ClipConfig:
        return {
            Method.GRPO: ClipConfig.grpo,
            Method.DAPO: ClipConfig.dapo,
            Method.GSPO: ClipConfig.gspo,
            Method.DCPO: ClipConfig.dcpo,
        }[self]()


@dataclass
class Response:
    """One sampled response. ``logp_new`` defaults to ``logp_old`` (ratio 1)."""

    tokens: np.ndarray
    logp_old: np.ndarray
    logp_new: np.ndarray | None = None
    advantage: float = 0.0
    logp_ref: np.ndarray | None = None
    reward: float = 0.0
    contexts: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.logp_old = np.asarray(self.logp_old, dtype=np.float64)
        if self.logp_new is None:
            self.logp_new = self.logp_old.copy()
        else:
            self.logp_new = np.asarray(self.logp_new, dtype=np.float64)
        if self.logp_ref is not None:
            self.logp_ref = np.asarray(self.logp_ref, dtype=np.float64)
        if self.tokens.size < 1:
            raise ValueError("response must contain at least one token")
        if self.logp_old.shape != self.tokens.shape or self.logp_new.shape != self.tokens.shape:
            raise ValueError("log-probability arrays must match the token count")

    def __len__(self) -> int:
        return int(self.tokens.size)


@dataclass
class RolloutGroup:
    prompt_id: str
    responses: list[Response]
    prompt: tuple[int, ...] = ()

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.responses], dtype=np.float64)

    @property
    def advantages(self) -> np.ndarray:
        return np.array([r.advantage for r in self.responses], dtype=np.float64)


@dataclass
class FlatBatch:
    """Token-major view of a batch of groups."""

    logp_old: np.ndarray
    logp_new: np.ndarray
    logp_ref: np.ndarray | None
    token_resp: np.ndarray  # response index of each token
    resp_adv: np.ndarray
    resp_len: np.ndarray
    resp_group: np.ndarray  # group index of each response
    group_size: np.ndarray
    tokens: np.ndarray | None = None
    contexts: np.ndarray | None = None

    @property
    def n_groups(self) -> int:
        return int(self.group_size.size)

    @property
    def n_tokens(self) -> int:
        return int(self.logp_old.size)

    @property
    def token_adv(self) -> np.ndarray:
        return self.resp_adv[self.token_resp]

    def with_logp_new(self, logp_new: np.ndarray) -> "FlatBatch":
        logp_new = np.asarray(logp_new, dtype=np.float64)
        if logp_new.shape != self.logp_old.shape:
            raise ValueError("logp_new shape mismatch")
        out = FlatBatch(**{**self.__dict__})
        out.logp_new = logp_new
        return out


BatchLike = Union[FlatBatch, Sequence[RolloutGroup]]


def flatten(groups: BatchLike) -> FlatBatch:
    if isinstance(groups, FlatBatch):
        return groups
    groups = list(groups)
    if not groups:
        raise ValueError("empty batch")
    responses = [r for g in groups for r in g.responses]
    if not responses:
        raise ValueError("batch has no responses")
    lengths = np.array([len(r) for r in responses], dtype=np.int64)
    group_size = np.array([len(g.responses) for g in groups], dtype=np.int64)
    if np.any(group_size == 0):
        raise ValueError("empty group in batch")
    have_ref = all(r.logp_ref is not None for r in responses)
    have_ctx = all(r.contexts is not None for r in responses)
    return FlatBatch(
        logp_old=np.concatenate([r.logp_old for r in responses]),
        logp_new=np.concatenate([r.logp_new for r in responses]),
        logp_ref=np.concatenate([r.logp_ref for r in responses]) if have_ref else None,
        token_resp=np.repeat(np.arange(len(responses)), lengths),
        resp_adv=np.array([r.advantage for r in responses], dtype=np.float64),
        resp_len=lengths,
        resp_group=np.repeat(np.arange(len(groups)), group_size),
        group_size=group_size,
        tokens=np.concatenate([r.tokens for r in responses]),
        contexts=np.concatenate([r.contexts for r in responses]) if have_ctx else None,
    )


@dataclass
class SurrogateResult:
    objective: float
    clipped: np.ndarray  # per token
    dlogp: np.ndarray  # dJ/dlogp_new per token
    contributions: np.ndarray  # per-response share of the objective
    clipped_responses: int = 0
    kl: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def clipped_tokens(self) -> int:
        return int(np.count_nonzero(self.clipped))

    @property
    def total_tokens(self) -> int:
        return int(self.clipped.size)

    @property
    def counts(self) -> tuple[int, int]:
        return self.clipped_tokens, self.total_tokens


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite log-probabilities")


def token_ratios(logp_new, logp_old) -> np.ndarray:
    new = np.asarray(logp_new, dtype=np.float64)
    old = np.asarray(logp_old, dtype=np.float64)
    if new.shape != old.shape:
        raise ValueError(f"shape mismatch: {new.shape} vs {old.shape}")
    _check_finite(new, old)
    r = np.exp(new - old)
    _check_finite(r)
    return r


def sequence_ratio(logp_new, logp_old, length: int | None = None) -> float:
    """Geometric mean of the token ratios of one response."""
    new = np.asarray(logp_new, dtype=np.float64)
    old = np.asarray(logp_old, dtype=np.float64)
    length = new.size if length is None else int(length)
    if length < 1 or new.size < 1:
        raise ValueError("sequence ratio needs at least one token")
    _check_finite(new, old)
    return float(np.exp(np.sum(new - old) / length))


def clipped_terms(r, adv, lower, upper, cap=np.inf):
    """Vectorized min-form clipped term.

    The ratio is first capped at ``cap`` (the dual-clip ceiling, ``inf`` where
    none applies). Returns ``(value, flagged, dvalue_dr)``; a token is flagged
    when the min picks a branch that carries no gradient through ``r``.
    Exact boundary hits count as clipped. Zero-advantage tokens are never
    flagged: they carry no gradient, but not because of clipping.
    """
    r = np.asarray(r, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    capped = r >= cap
    rc = np.minimum(r, cap)
    pos = adv > 0
    neg = adv < 0
    flagged = (pos & (rc >= upper)) | (neg & (rc <= lower)) | ((pos | neg) & capped)
    value = np.minimum(rc * adv, np.clip(rc, lower, upper) * adv)
    dvalue_dr = np.where(flagged, 0.0, adv)
    return value, flagged, dvalue_dr


def clipped_term(r: float, adv: float, bounds: ClipBounds, r_max: float | None = None) -> tuple[float, bool]:
    if r < 0:
        raise ValueError("ratio must be non-negative")
    cap = np.inf if r_max is None else r_max
    value, flagged, _ = clipped_terms(r, adv, bounds.lower, bounds.upper, cap)
    return float(value), bool(flagged)


def kl_per_token(logp_new, logp_ref) -> np.ndarray:
    """k3 estimator ``exp(d) - d - 1`` with ``d = logp_ref - logp_new``."""
    new = np.asarray(logp_new, dtype=np.float64)
    ref = np.asarray(logp_ref, dtype=np.float64)
    if new.shape != ref.shape:
        raise ValueError(f"shape mismatch: {new.shape} vs {ref.shape}")
    _check_finite(new, ref)
    d = ref - new
    return np.expm1(d) - d


def kl_penalty(logp_new, logp_ref) -> float:
    """Mean per-token k3 KL estimate for one response."""
    return float(np.mean(kl_per_token(logp_new, logp_ref)))


def _caps(cfg: ClipConfig, adv: np.ndarray) -> np.ndarray:
    cap = np.full(adv.shape, np.inf)
    for sign in (-1, 1):
        c = cfg.ceiling_for(sign)
        if c is not None:
            cap[np.sign(adv) == sign] = c
    return cap


def _token_level(fb: FlatBatch, cfg: ClipConfig):
    r = token_ratios(fb.logp_new, fb.logp_old)
    adv = fb.token_adv
    b = bounds_for(np.exp(fb.logp_old), cfg)
    value, flagged, dvdr = clipped_terms(r, adv, b.lower, b.upper, _caps(cfg, adv))
    return value, flagged, dvdr * r


def _per_response(fb: FlatBatch, x: np.ndarray) -> np.ndarray:
    return np.bincount(fb.token_resp, weights=x, minlength=fb.resp_len.size)


def _per_group(fb: FlatBatch, x: np.ndarray) -> np.ndarray:
    return np.bincount(fb.resp_group, weights=x, minlength=fb.n_groups)


def _require_mode(cfg: ClipConfig, *modes: ClipMode) -> None:
    if cfg.mode not in modes:
        names = ", ".join(m.value for m in modes)
        raise ValueError(f"clip mode {cfg.mode.value!r} not valid here (expected {names})")


def loss_grpo(groups: BatchLike, cfg: ClipConfig, beta: float = 0.0) -> SurrogateResult:
    _require_mode(cfg, ClipMode.FIXED_SYMMETRIC, ClipMode.FIXED_ASYMMETRIC, ClipMode.DYNAMIC_ADAPTIVE)
    fb = flatten(groups)
    value, flagged, coef = _token_level(fb, cfg)
    n = fb.n_groups
    resp_mean = _per_response(fb, value) / fb.resp_len
    group_obj = _per_group(fb, resp_mean) / fb.group_size
    weight = 1.0 / (fb.resp_len * fb.group_size[fb.resp_group] * n)
    tok_w = weight[fb.token_resp]
    dlogp = coef * tok_w
    obj = float(np.mean(group_obj))
    kl = 0.0
    if beta > 0:
        if fb.logp_ref is None:
            raise ValueError("beta > 0 requires reference log-probabilities")
        k3 = kl_per_token(fb.logp_new, fb.logp_ref)
        kl_group = _per_group(fb, _per_response(fb, k3) / fb.resp_len) / fb.group_size
        kl = float(np.mean(kl_group))
        obj -= beta * kl
        d = fb.logp_ref - fb.logp_new
        dlogp = dlogp - beta * (-np.expm1(d)) * tok_w
    return SurrogateResult(obj, flagged, dlogp, resp_mean * weight * fb.resp_len, kl=kl)


def loss_dapo(groups: BatchLike, cfg: ClipConfig) -> SurrogateResult:
    _require_mode(cfg, ClipMode.FIXED_ASYMMETRIC, ClipMode.FIXED_SYMMETRIC)
    fb = flatten(groups)
    value, flagged, coef = _token_level(fb, cfg)
    total = fb.n_tokens
    resp_sum = _per_response(fb, value)
    return SurrogateResult(float(np.sum(resp_sum)) / total, flagged, coef / total, resp_sum / total)


def loss_gspo(groups: BatchLike, cfg: ClipConfig) -> SurrogateResult:
    _require_mode(cfg, ClipMode.SEQUENCE_LEVEL)
    fb = flatten(groups)
    _check_finite(fb.logp_new, fb.logp_old)
    s = np.exp(_per_response(fb, fb.logp_new - fb.logp_old) / fb.resp_len)
    b = fixed_bounds(cfg)
    adv = fb.resp_adv
    value, flagged, dvds = clipped_terms(s, adv, b.lower, b.upper, _caps(cfg, adv))
    n = fb.n_groups
    weight = 1.0 / (fb.group_size[fb.resp_group] * n)
    group_obj = _per_group(fb, value) / fb.group_size
    # ds/dlogp_t = s / |o|
    dlogp = (dvds * s * weight / fb.resp_len)[fb.token_resp]
    return SurrogateResult(
        float(np.mean(group_obj)),
        flagged[fb.token_resp],
        dlogp,
        value * weight,
        clipped_responses=int(np.count_nonzero(flagged)),
        extra={"sequence_ratio": s},
    )


def loss_dcpo(groups: BatchLike, cfg: ClipConfig) -> SurrogateResult:
    """Per-response token mean, summed over every response in the batch.

    Accepts the fixed token-level modes as well, which is how the relation to
    the GRPO aggregation is checked.
    """
    _require_mode(cfg, ClipMode.DYNAMIC_ADAPTIVE, ClipMode.FIXED_SYMMETRIC, ClipMode.FIXED_ASYMMETRIC)
    fb = flatten(groups)
    value, flagged, coef = _token_level(fb, cfg)
    resp_mean = _per_response(fb, value) / fb.resp_len
    obj = float(np.sum(_per_group(fb, resp_mean)))
    return SurrogateResult(obj, flagged, coef / fb.resp_len[fb.token_resp], resp_mean)


def objective(method: Method | str, groups: BatchLike, cfg: ClipConfig, beta: float = 0.0) -> SurrogateResult:
    method = Method(method)
    if method is Method.GRPO:
        _require_mode(cfg, ClipMode.FIXED_SYMMETRIC)
        return loss_grpo(groups, cfg, beta)
    if method is Method.DAPO:
        _require_mode(cfg, ClipMode.FIXED_ASYMMETRIC)
        return loss_dapo(groups, cfg)
    if method is Method.GSPO:
        return loss_gspo(groups, cfg)
    _require_mode(cfg, ClipMode.DYNAMIC_ADAPTIVE)
    return loss_dcpo(groups, cfg)
