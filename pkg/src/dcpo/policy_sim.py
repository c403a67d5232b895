"""Tabular k-gram softmax policy used as a stand-in for a language model.

The policy conditions on the last ``k`` tokens (prompt included; history
before the prompt is padded with the end token). Context ``(h_1, ..., h_k)``
maps to row ``sum(h_j * V**(k-j))`` of a dense ``V**k x V`` logit table.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .clipping import ClipConfig
from .surrogate import (
    BatchLike,
    FlatBatch,
    Method,
    Response,
    RolloutGroup,
    SurrogateResult,
    flatten,
    objective,
)

__all__ = [
    "TabularPolicy",
    "log_softmax",
    "sample_batch",
    "sample_group",
    "greedy_decode",
    "logprob_of",
    "entropy",
    "surrogate_grad",
    "fd_check",
    "save_policy",
    "load_policy",
]

CHECKPOINT_VERSION = "tabular-policy v1"


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


@dataclass
class TabularPolicy:
    vocab_size: int
    k: int = 2
    max_len: int = 12
    logits: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.vocab_size < 3 or self.k < 0 or self.max_len < 1:
            raise ValueError("invalid policy dimensions")
        shape = (self.vocab_size**self.k, self.vocab_size)
        if self.logits is None:
            self.logits = np.zeros(shape)
        else:
            self.logits = np.array(self.logits, dtype=np.float64)
            if self.logits.shape != shape:
                raise ValueError(f"logit table must have shape {shape}, got {self.logits.shape}")
        if np.any(np.isnan(self.logits)) or np.any(self.logits == np.inf):
            raise ValueError("logits must be finite or -inf")
        if np.any(np.all(self.logits == -np.inf, axis=1)):
            raise ValueError("every row needs a finite logit")

    @classmethod
    def init(cls, vocab_size: int, k: int = 2, max_len: int = 12, scale: float = 0.0, seed: int = 0) -> "TabularPolicy":
        pol = cls(vocab_size, k, max_len)
        if scale > 0:
            pol.logits = np.random.default_rng(seed).normal(0.0, scale, pol.logits.shape)
        return pol

    @property
    def end_token(self) -> int:
        return self.vocab_size - 1

    @property
    def n_contexts(self) -> int:
        return self.vocab_size**self.k

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.vocab_size, self.k, self.max_len, self.logits.copy())

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def context_of(self, history: Sequence[int]) -> int:
        hist = [self.end_token] * self.k + [int(t) for t in history]
        ctx = 0
        for t in hist[len(hist) - self.k :] if self.k else []:
            ctx = ctx * self.vocab_size + t
        return ctx

    def advance(self, ctx, token):
        """Context after appending ``token``; works elementwise on arrays."""
        if self.k == 0:
            return ctx * 0
        return (ctx * self.vocab_size + token) % self.n_contexts

    def contexts_for(self, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
        out = np.empty(len(response), dtype=np.int64)
        ctx = self.context_of(prompt)
        for t, tok in enumerate(response):
            out[t] = ctx
            ctx = self.advance(ctx, int(tok))
        return out


def _top_p_filter(p: np.ndarray, top_p: float) -> np.ndarray:
    order = np.argsort(-p, axis=1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=1)
    before = np.cumsum(sorted_p, axis=1) - sorted_p
    keep_sorted = before < top_p
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    q = np.where(keep, p, 0.0)
    return q / q.sum(axis=1, keepdims=True)


def _rollout(policy: TabularPolicy, start_ctx: np.ndarray, rng: np.random.Generator | None,
             temperature: float = 1.0, top_p: float = 1.0):
    """Generate one sequence per start context. ``rng=None`` decodes greedily.

    Recorded log-probabilities are always under the unmodified policy.
    """
    n = start_ctx.size
    M = policy.max_len
    end = policy.end_token
    logp_table = policy.log_probs()
    if rng is not None:
        if temperature == 1.0:
            sample_table = np.exp(logp_table)
        else:
            sample_table = np.exp(log_softmax(policy.logits / temperature))
    tokens = np.full((n, M), -1, dtype=np.int64)
    logp = np.zeros((n, M))
    ctxs = np.zeros((n, M), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    ctx = start_ctx.astype(np.int64).copy()
    alive = np.arange(n)
    for t in range(M):
        if alive.size == 0:
            break
        c = ctx[alive]
        if rng is None:
            tok = np.argmax(policy.logits[c], axis=1)
        else:
            p = sample_table[c]
            if top_p < 1.0:
                p = _top_p_filter(p, top_p)
            cdf = np.cumsum(p, axis=1)
            u = rng.random(alive.size) * cdf[:, -1]
            tok = np.minimum((cdf <= u[:, None]).sum(axis=1), policy.vocab_size - 1)
        tokens[alive, t] = tok
        logp[alive, t] = logp_table[c, tok]
        ctxs[alive, t] = c
        lengths[alive] += 1
        ctx[alive] = policy.advance(c, tok)
        alive = alive[tok != end]
    return tokens, logp, ctxs, lengths


def sample_batch(
    policy: TabularPolicy,
    prompts: Sequence[Sequence[int]],
    G: int,
    temperature: float = 1.0,
    top_p: float = 1.0,
    rng: np.random.Generator | int | None = 0,
    prompt_ids: Sequence[str] | None = None,
) -> list[RolloutGroup]:
    """Sample ``G`` responses for every prompt in one vectorized pass."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must lie in (0, 1]")
    if G < 1:
        raise ValueError("group size must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    starts = np.repeat([policy.context_of(p) for p in prompts], G)
    tokens, logp, ctxs, lengths = _rollout(policy, starts, rng, temperature, top_p)
    groups = []
    for gi, prompt in enumerate(prompts):
        responses = []
        for j in range(gi * G, (gi + 1) * G):
            L = lengths[j]
            responses.append(Response(tokens[j, :L], logp[j, :L], contexts=ctxs[j, :L]))
        pid = prompt_ids[gi] if prompt_ids is not None else str(gi)
        groups.append(RolloutGroup(pid, responses, tuple(int(t) for t in prompt)))
    return groups


def sample_group(policy: TabularPolicy, prompt: Sequence[int], G: int, temperature: float = 1.0,
                 top_p: float = 1.0, rng_seed: int = 0) -> list[Response]:
    return sample_batch(policy, [prompt], G, temperature, top_p, rng_seed)[0].responses


def greedy_decode(policy: TabularPolicy, prompts: Sequence[Sequence[int]]) -> list[np.ndarray]:
    starts = np.array([policy.context_of(p) for p in prompts], dtype=np.int64)
    tokens, _, _, lengths = _rollout(policy, starts, None)
    return [tokens[i, : lengths[i]] for i in range(len(prompts))]


def logprob_of(policy: TabularPolicy, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
    resp = np.asarray(response, dtype=np.int64)
    if np.any(resp < 0) or np.any(resp >= policy.vocab_size):
        raise ValueError("response contains tokens outside the vocabulary")
    ctxs = policy.contexts_for(prompt, resp)
    return policy.log_probs()[ctxs, resp]


def entropy(policy: TabularPolicy, contexts: Mapping[int, float] | Sequence[int] | np.ndarray) -> float:
    """Visitation-weighted mean Shannon entropy (nats) of the policy rows.

    ``contexts`` is either a mapping context -> weight or the list of visited
    context ids (weighted by multiplicity).
    """
    if isinstance(contexts, Mapping):
        ids = np.fromiter(contexts.keys(), dtype=np.int64)
        w = np.fromiter(contexts.values(), dtype=np.float64)
    else:
        ids, counts = np.unique(np.asarray(contexts, dtype=np.int64), return_counts=True)
        w = counts.astype(np.float64)
    if ids.size == 0 or w.sum() <= 0:
        raise RuntimeError("no visited contexts")
    logp = policy.log_probs()[ids]
    p = np.exp(logp)
    h = -np.sum(p * np.where(p > 0, logp, 0.0), axis=1)
    return float(np.dot(w, h) / w.sum())


def _attach(policy: TabularPolicy, batch: BatchLike) -> FlatBatch:
    if isinstance(batch, FlatBatch):
        fb = batch
    else:
        groups = list(batch)
        for g in groups:
            for r in g.responses:
                if r.contexts is None:
                    r.contexts = policy.contexts_for(g.prompt, r.tokens)
        fb = flatten(groups)
    if fb.contexts is None or fb.tokens is None:
        raise ValueError("batch lacks token contexts")
    return fb


def _evaluate(policy: TabularPolicy, fb: FlatBatch, method, cfg, beta) -> SurrogateResult:
    logp_new = policy.log_probs()[fb.contexts, fb.tokens]
    return objective(method, fb.with_logp_new(logp_new), cfg, beta)


def surrogate_grad(
    policy: TabularPolicy,
    batch: BatchLike,
    method: Method | str,
    cfg: ClipConfig,
    beta: float = 0.0,
) -> tuple[np.ndarray, SurrogateResult]:
    """Analytic gradient of the objective with respect to every logit.

    ``logp_new`` is recomputed from ``policy``; the batch supplies tokens,
    contexts, ``logp_old`` and advantages. Returns the gradient table (same
    shape as ``policy.logits``) and the surrogate result at the current point.
    """
    fb = _attach(policy, batch)
    res = _evaluate(policy, fb, method, cfg, beta)
    C, V = policy.logits.shape
    coef = res.dlogp
    # d logp(tok | c) / d logit[c, :] = onehot(tok) - softmax(c)
    grad = np.bincount(fb.contexts * V + fb.tokens, weights=coef, minlength=C * V).reshape(C, V)
    row = np.bincount(fb.contexts, weights=coef, minlength=C)
    visited = np.unique(fb.contexts)
    grad[visited] -= row[visited, None] * np.exp(log_softmax(policy.logits[visited]))
    return grad, res


def fd_check(
    policy: TabularPolicy,
    batch: BatchLike,
    method: Method | str,
    cfg: ClipConfig,
    h: float = 1e-5,
    beta: float = 0.0,
    n_coords: int | None = None,
    seed: int = 0,
    atol: float = 1e-6,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    Coordinates are drawn from the rows of visited contexts (all of them when
    ``n_coords`` is None). Relative error is ``|a - f| / max(|a|, |f|, atol)``.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    fb = _attach(policy, batch)
    grad, _ = surrogate_grad(policy, fb, method, cfg, beta)
    V = policy.vocab_size
    rows = np.unique(fb.contexts)
    coords = [(int(c), v) for c in rows for v in range(V)]
    if n_coords is not None and n_coords < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    probe = policy.copy()
    worst = 0.0
    for c, v in coords:
        base = probe.logits[c, v]
        probe.logits[c, v] = base + h
        up = _evaluate(probe, fb, method, cfg, beta).objective
        probe.logits[c, v] = base - h
        down = _evaluate(probe, fb, method, cfg, beta).objective
        probe.logits[c, v] = base
        fd = (up - down) / (2 * h)
        a = grad[c, v]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), atol))
    return worst


def save_policy(policy: TabularPolicy, path: str | Path) -> None:
    """Sparse text checkpoint: header, dimensions, then non-zero rows.

    Values are written with 17 significant digits, which round-trips doubles.
    """
    lines = [CHECKPOINT_VERSION, f"{policy.vocab_size} {policy.k} {policy.max_len}"]
    for c in np.flatnonzero(np.any(policy.logits != 0, axis=1)):
        lines.append(f"{c} " + " ".join(f"{x:.17g}" for x in policy.logits[c]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_policy(path: str | Path) -> TabularPolicy:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a {CHECKPOINT_VERSION} checkpoint")
    V, k, M = (int(x) for x in lines[1].split())
    pol = TabularPolicy(V, k, M)
    for line in lines[2:]:
        if not line.strip():
            continue
        parts = line.split()
        pol.logits[int(parts[0])] = [float(x) for x in parts[1:]]
    return pol
