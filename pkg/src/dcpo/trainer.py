"""Desk-scale RLVR training loop.

Each step snapshots the policy, generates ``G`` responses for ``gen_batch``
prompts with the snapshot, scores them, computes advantages for the chosen
method and then applies ``gen_batch / mini_batch`` sequential gradient-ascent
updates, every one of them measured against the same snapshot.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import advantage as adv_mod
from .advantage import PromptStats, prompt_key
from .clipping import ClipConfig
from .metrics import tcr as tcr_of, rur as rur_of
from .policy_sim import TabularPolicy, entropy, greedy_decode, sample_batch, save_policy, surrogate_grad
from .reward import TaskInstance, Vocab, generate_tasks, read_tasks, score_response, write_tasks
from .surrogate import Method, RolloutGroup

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "StepReport",
    "RunState",
    "dapo_filter",
    "FilterResult",
    "evaluate",
    "init_state",
    "run_step",
    "train",
    "save_stats",
    "load_stats",
    "STEP_COLUMNS",
]


@dataclass
class TrainConfig:
    method: Method = Method.DCPO
    G: int = 16
    gen_batch: int = 64
    mini_batch: int = 8
    steps: int = 400
    lr: float = 0.05
    optimizer: str = "adam"
    beta: float = 0.001
    clip: ClipConfig | None = None
    seed: int = 0
    eval_every: int = 50
    eval_k: int = 8
    n_eval_tasks: int = 64
    task_path: str | None = None
    n_tasks: int = 512
    moduli: tuple[int, ...] = (7, 9)
    copy_fraction: float = 0.0
    label_noise: float = 0.0
    vocab_size: int = 12
    k: int = 2
    max_len: int = 12
    temperature: float = 1.0
    top_p: float = 1.0
    init_scale: float = 0.0
    resample_budget: int | None = None

    def __post_init__(self) -> None:
        self.method = Method(self.method)
        if isinstance(self.clip, dict):
            # partial clip sections override the method's defaults
            base = dataclasses.asdict(self.method.default_clip())
            self.clip = ClipConfig(**{**base, **self.clip})
        if self.clip is None:
            self.clip = self.method.default_clip()
        self.moduli = tuple(int(m) for m in self.moduli)
        problems = self.validate()
        if problems:
            raise ValueError("; ".join(problems))

    def validate(self) -> list[str]:
        errs = []
        if self.G < 2:
            errs.append("G: group size must be at least 2")
        if self.gen_batch < 1 or self.mini_batch < 1:
            errs.append("gen_batch/mini_batch: must be positive")
        elif self.gen_batch % self.mini_batch:
            errs.append("mini_batch: must divide gen_batch")
        if self.steps < 0:
            errs.append("steps: must be non-negative")
        if self.lr < 0 or not math.isfinite(self.lr):
            errs.append("lr: must be a non-negative number")
        if self.optimizer not in ("adam", "sgd"):
            errs.append(f"optimizer: expected 'adam' or 'sgd', got {self.optimizer!r}")
        if self.beta < 0:
            errs.append("beta: must be non-negative")
        if self.eval_k < 1:
            errs.append("eval_k: must be at least 1")
        if self.temperature <= 0:
            errs.append("temperature: must be positive")
        if not 0 < self.top_p <= 1:
            errs.append("top_p: must lie in (0, 1]")
        expected = self.method.default_clip().mode
        if self.clip.mode is not expected:
            errs.append(f"clip.mode: {self.method.value} needs {expected.value!r}, got {self.clip.mode.value!r}")
        return errs

    @property
    def budget(self) -> int:
        return 4 * self.gen_batch if self.resample_budget is None else self.resample_budget

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["method"] = self.method.value
        d["clip"] = {k: (v.value if hasattr(v, "value") else v) for k, v in dataclasses.asdict(self.clip).items()}
        d["moduli"] = list(self.moduli)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**d)


STEP_COLUMNS = [
    "step",
    "epoch",
    "objective",
    "tcr",
    "rur",
    "entropy",
    "mean_reward",
    "avg1",
    "avgk",
    "clipped_tokens",
    "total_tokens",
    "responses_generated",
    "responses_discarded",
    "clipped_responses",
    "skipped",
]


@dataclass
class StepReport:
    step: int
    epoch: int
    objective: float
    tcr: float
    rur: float
    entropy: float
    mean_reward: float
    avg1: float = math.nan
    avgk: float = math.nan
    clipped_tokens: int = 0
    total_tokens: int = 0
    responses_generated: int = 0
    responses_discarded: int = 0
    clipped_responses: int = 0
    skipped: int = 0
    microbatch_counts: list = field(default_factory=list, repr=False)

    def row(self) -> list[str]:
        out = []
        for name in STEP_COLUMNS:
            v = getattr(self, name)
            out.append(f"{v:.17g}" if isinstance(v, float) else str(v))
        return out


@dataclass
class RunState:
    policy: TabularPolicy
    ref: TabularPolicy
    tasks: list[TaskInstance]
    eval_tasks: list[TaskInstance]
    stats: dict[str, PromptStats]
    seed: int
    step: int = 0
    epoch: int = 0
    cursor: int = 0
    order: np.ndarray | None = None
    optimizer: "Adam | None" = None
    last_groups: list = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.order is None:
            self.order = self._shuffle(self.epoch)

    def _shuffle(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch, 7]).permutation(len(self.tasks))

    def next_tasks(self, n: int) -> list[TaskInstance]:
        out = []
        for _ in range(n):
            if self.cursor >= len(self.order):
                self.epoch += 1
                self.order = self._shuffle(self.epoch)
                self.cursor = 0
            out.append(self.tasks[self.order[self.cursor]])
            self.cursor += 1
        return out


class Adam:
    """Adam ascent on the logit table (bias-corrected, no weight decay)."""

    def __init__(self, shape: tuple[int, ...], b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def direction(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class FilterResult:
    kept: list[RolloutGroup]
    discarded: list[RolloutGroup]

    @property
    def n_discarded_responses(self) -> int:
        return sum(len(g.responses) for g in self.discarded)


def _correct_count(group: RolloutGroup) -> int:
    return sum(1 for r in group.responses if r.reward == 1)


def dapo_filter(groups: Sequence[RolloutGroup]) -> FilterResult:
    """Keep groups whose correct-answer count is strictly between 0 and G."""
    kept, dropped = [], []
    for g in groups:
        c = _correct_count(g)
        (kept if 0 < c < len(g.responses) else dropped).append(g)
    return FilterResult(kept, dropped)


def evaluate(policy: TabularPolicy, tasks: Sequence[TaskInstance], k: int, seed: int = 0) -> tuple[float, float]:
    """Greedy accuracy and mean accuracy over ``k`` temperature-1 samples."""
    if not tasks:
        raise ValueError("empty evaluation set")
    if k < 1:
        raise ValueError("k must be at least 1")
    vocab = Vocab(policy.vocab_size)
    prompts = [t.prompt for t in tasks]
    greedy = greedy_decode(policy, prompts)
    avg1 = np.mean([score_response(t, r, vocab).answer_ok for t, r in zip(tasks, greedy)])
    groups = sample_batch(policy, prompts, k, rng=np.random.default_rng([seed, 11]))
    hits = [score_response(t, r.tokens, vocab).answer_ok for t, g in zip(tasks, groups) for r in g.responses]
    return float(avg1), float(np.mean(hits))


def init_state(cfg: TrainConfig, tasks: Sequence[TaskInstance] | None = None) -> RunState:
    vocab = Vocab(cfg.vocab_size)
    if tasks is None:
        if cfg.task_path:
            tasks = read_tasks(cfg.task_path)
        else:
            tasks = generate_tasks(cfg.n_tasks, vocab, cfg.seed, cfg.moduli, cfg.copy_fraction,
                                   label_noise=cfg.label_noise)
    if not tasks:
        raise ValueError("empty task set")
    eval_tasks = generate_tasks(cfg.n_eval_tasks, vocab, cfg.seed + 1_000_003, cfg.moduli, cfg.copy_fraction)
    policy = TabularPolicy.init(cfg.vocab_size, cfg.k, cfg.max_len, cfg.init_scale, cfg.seed)
    return RunState(policy, policy.copy(), list(tasks), eval_tasks, {}, cfg.seed)


def _generate(state: RunState, old: TabularPolicy, tasks: list[TaskInstance], cfg: TrainConfig,
              rng: np.random.Generator) -> list[RolloutGroup]:
    vocab = Vocab(cfg.vocab_size)
    ids = [prompt_key(t.prompt) for t in tasks]
    groups = sample_batch(old, [t.prompt for t in tasks], cfg.G, cfg.temperature, cfg.top_p, rng, ids)
    for task, g in zip(tasks, groups):
        for r in g.responses:
            r.reward = float(score_response(task, r.tokens, vocab).reward)
    return groups


def _assign_advantages(state: RunState, groups: Sequence[RolloutGroup], method: Method) -> None:
    """Register every group in the prompt statistics, then set advantages."""
    for g in groups:
        stats = state.stats.get(g.prompt_id, PromptStats(g.prompt_id))
        rewards = g.rewards
        if method is Method.DCPO:
            bundle, stats = adv_mod.sas_advantages(rewards, stats)
            values = bundle.selected
        else:
            stats = adv_mod.update_stats(stats, rewards)
            values = adv_mod.step_standardize(rewards)
        state.stats[g.prompt_id] = stats
        for r, a in zip(g.responses, values):
            r.advantage = float(a)


def run_step(state: RunState, cfg: TrainConfig) -> StepReport:
    """One generation step followed by its minibatch updates. Mutates ``state``."""
    method = cfg.method
    step_epoch = state.epoch if state.cursor < len(state.order) else state.epoch + 1
    old = state.policy.copy()
    rng = np.random.default_rng([cfg.seed, state.step, 1])
    groups = _generate(state, old, state.next_tasks(cfg.gen_batch), cfg, rng)
    _assign_advantages(state, groups, method)
    generated = list(groups)

    discarded: list[RolloutGroup] = []
    if method is Method.DAPO:
        filt = dapo_filter(groups)
        kept, discarded = filt.kept, list(filt.discarded)
        budget = cfg.budget
        while len(kept) < cfg.gen_batch and budget > 0:
            n = min(cfg.gen_batch - len(kept), budget)
            budget -= n
            extra = _generate(state, old, state.next_tasks(n), cfg, rng)
            _assign_advantages(state, extra, method)
            generated.extend(extra)
            filt = dapo_filter(extra)
            kept.extend(filt.kept)
            discarded.extend(filt.discarded)
        groups = kept
    state.last_groups = generated

    all_resp = [r for g in generated for r in g.responses]
    used = {id(r) for g in groups for r in g.responses}
    used_adv = [r.advantage if id(r) in used else 0.0 for r in all_resp]
    contexts = np.concatenate([r.contexts for r in all_resp])
    report = StepReport(
        step=state.step,
        epoch=step_epoch,
        objective=math.nan,
        tcr=math.nan,
        rur=rur_of(used_adv),
        entropy=entropy(old, contexts),
        mean_reward=float(np.mean([r.reward for r in all_resp])),
        responses_generated=len(all_resp),
        responses_discarded=sum(len(g.responses) for g in discarded),
    )

    if not groups:
        log.warning("step %d: filtered batch is empty after the resample budget; skipping update", state.step)
        report.skipped = 1
        state.step += 1
        return report

    if method is Method.GRPO and cfg.beta > 0:
        ref_lp = state.ref.log_probs()
        for g in groups:
            for r in g.responses:
                r.logp_ref = ref_lp[r.contexts, r.tokens]

    objectives, counts, clipped_resp = [], [], 0
    for start in range(0, len(groups), cfg.mini_batch):
        chunk = groups[start : start + cfg.mini_batch]
        grad, res = surrogate_grad(state.policy, chunk, method, cfg.clip, cfg.beta)
        if cfg.lr:
            if cfg.optimizer == "adam":
                if state.optimizer is None:
                    state.optimizer = Adam(grad.shape)
                state.policy.logits += cfg.lr * state.optimizer.direction(grad)
            else:
                state.policy.logits += cfg.lr * grad
        objectives.append(res.objective)
        counts.append(res.counts)
        clipped_resp += res.clipped_responses
    report.objective = float(np.mean(objectives))
    report.tcr = tcr_of(counts)
    report.clipped_tokens = sum(c for c, _ in counts)
    report.total_tokens = sum(t for _, t in counts)
    report.clipped_responses = clipped_resp
    report.microbatch_counts = counts
    state.step += 1
    return report


def save_stats(stats: dict[str, PromptStats], path: str | Path) -> None:
    cols = ["prompt_id", "i", "mu_new", "sigma_new", "n_new", "mu_old", "sigma_old", "n_old"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for pid in sorted(stats):
            s = stats[pid]
            w.writerow([
                s.prompt_id, s.i, f"{s.mu_new:.17g}", f"{s.sigma_new:.17g}", s.n_new,
                f"{s.mu_old:.17g}", f"{s.sigma_old:.17g}", s.n_old,
            ])


def load_stats(path: str | Path) -> dict[str, PromptStats]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            s = PromptStats(
                row["prompt_id"], int(row["i"]), float(row["mu_new"]), float(row["sigma_new"]),
                int(row["n_new"]), float(row["mu_old"]), float(row["sigma_old"]), int(row["n_old"]),
            )
            out[s.prompt_id] = s
    return out


def train(cfg: TrainConfig, out_dir: str | Path, progress: bool = False) -> Path:
    """Run ``cfg.steps`` steps and write the run directory.

    Layout: ``config.json``, ``tasks.tsv``, ``steps.csv``, ``eval.csv``,
    ``policy.ckpt`` and ``prompt_stats.ckpt``. Rows are flushed as they are
    produced so a failed run keeps its partial history.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    state = init_state(cfg)
    write_tasks(out / "tasks.tsv", state.tasks, header=f"seed={cfg.seed} n={len(state.tasks)}")
    save_policy(state.policy, out / "policy.ckpt")
    save_stats(state.stats, out / "prompt_stats.ckpt")
    with open(out / "steps.csv", "w", newline="", encoding="utf-8") as sf, \
            open(out / "eval.csv", "w", newline="", encoding="utf-8") as ef:
        steps_w = csv.writer(sf, lineterminator="\n")
        eval_w = csv.writer(ef, lineterminator="\n")
        steps_w.writerow(STEP_COLUMNS)
        eval_w.writerow(["step", "avg1", f"avg{cfg.eval_k}"])
        for _ in range(cfg.steps):
            report = run_step(state, cfg)
            last = report.step == cfg.steps - 1
            if cfg.eval_every > 0 and (report.step % cfg.eval_every == 0 or last):
                report.avg1, report.avgk = evaluate(state.policy, state.eval_tasks, cfg.eval_k,
                                                    seed=cfg.seed + report.step)
                eval_w.writerow([report.step, f"{report.avg1:.17g}", f"{report.avgk:.17g}"])
                ef.flush()
            steps_w.writerow(report.row())
            sf.flush()
            if progress:
                log.info("step %d tcr=%.4f rur=%.1f reward=%.3f", report.step, report.tcr, report.rur,
                         report.mean_reward)
    save_policy(state.policy, out / "policy.ckpt")
    save_stats(state.stats, out / "prompt_stats.ckpt")
    return out
