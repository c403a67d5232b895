"""Synthetic verifiable tasks and the rule-based reward.

Vocabulary layout for a vocabulary of size ``V``: tokens ``0 .. V-3`` are
digits (base ``V-2``), ``V-2`` is the answer delimiter and ``V-1`` the end
token. A response is well formed when it ends with the end token and contains
exactly one delimiter; the answer is the span between the two.

Rewards: ``1`` for a well-formed correct answer, ``0`` for a well-formed wrong
one, ``-1`` for a malformed response.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "Vocab",
    "TaskInstance",
    "Verdict",
    "FORMAT_RULE",
    "extract_answer",
    "canonical_int",
    "is_equivalent",
    "score_response",
    "make_mod_task",
    "make_copy_task",
    "generate_tasks",
    "write_tasks",
    "read_tasks",
]

FORMAT_RULE = "delim-end"

Answer = Union[int, tuple]


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self) -> None:
        if self.size < 3:
            raise ValueError("vocabulary needs at least one digit, a delimiter and an end token")

    @property
    def n_digits(self) -> int:
        return self.size - 2

    @property
    def delim(self) -> int:
        return self.size - 2

    @property
    def end(self) -> int:
        return self.size - 1


@dataclass(frozen=True)
class TaskInstance:
    """A prompt and its ground truth.

    ``answer`` is an ``int`` for arithmetic tasks (compared numerically) or a
    tuple of tokens for copy tasks (compared exactly).
    """

    prompt: tuple[int, ...]
    answer: Answer
    format_rule: str = FORMAT_RULE

    def __post_init__(self) -> None:
        if isinstance(self.answer, tuple):
            if not self.answer:
                raise ValueError("empty ground-truth answer")
        elif not isinstance(self.answer, (int, np.integer)) or self.answer < 0:
            raise ValueError(f"answer must be a non-negative integer or token tuple, got {self.answer!r}")
        if self.format_rule != FORMAT_RULE:
            raise ValueError(f"unknown format rule {self.format_rule!r}")


@dataclass(frozen=True)
class Verdict:
    format_ok: bool
    answer_ok: bool

    @property
    def reward(self) -> int:
        if not self.format_ok:
            return -1
        return 1 if self.answer_ok else 0


def _well_formed(response: Sequence[int], vocab: Vocab) -> bool:
    return len(response) > 0 and response[-1] == vocab.end and list(response).count(vocab.delim) == 1


def extract_answer(response: Sequence[int], vocab: Vocab) -> tuple[int, ...] | None:
    if not _well_formed(response, vocab):
        return None
    seq = list(response)
    return tuple(seq[seq.index(vocab.delim) + 1 : -1])


def canonical_int(digits: Sequence[int], vocab: Vocab) -> int | None:
    """Digits (most significant first) to an integer; leading zeros drop out."""
    if not digits:
        return None
    value = 0
    for d in digits:
        if not 0 <= d < vocab.n_digits:
            return None
        value = value * vocab.n_digits + int(d)
    return value


def is_equivalent(answer: Answer, response: Sequence[int], vocab: Vocab) -> bool:
    extracted = extract_answer(response, vocab)
    if extracted is None:
        return False
    if isinstance(answer, tuple):
        return extracted == answer
    return canonical_int(extracted, vocab) == int(answer)


def score_response(task: TaskInstance, response: Sequence[int], vocab: Vocab) -> Verdict:
    response = [int(t) for t in response]
    if not _well_formed(response, vocab):
        return Verdict(False, False)
    return Verdict(True, is_equivalent(task.answer, response, vocab))


def make_mod_task(x: int, y: int, m: int, vocab: Vocab) -> TaskInstance:
    """Prompt ``(m, x, y)``; the answer is ``(x + y) mod m``."""
    if not (2 <= m < vocab.n_digits and 0 <= x < vocab.n_digits and 0 <= y < vocab.n_digits):
        raise ValueError("operands and modulus must be single digit tokens")
    return TaskInstance((m, x, y), (x + y) % m)


def make_copy_task(noise: Sequence[int], span: Sequence[int], vocab: Vocab) -> TaskInstance:
    """Prompt ``noise + [delim] + span + [end]``; the answer repeats the marked span."""
    span = tuple(int(t) for t in span)
    return TaskInstance(tuple(noise) + (vocab.delim,) + span + (vocab.end,), span)


def generate_tasks(
    n: int,
    vocab: Vocab,
    seed: int,
    moduli: Sequence[int] = (7, 9),
    copy_fraction: float = 0.0,
    copy_span: int = 1,
    label_noise: float = 0.0,
) -> list[TaskInstance]:
    """Seeded mix of modular-arithmetic and copy tasks.

    ``label_noise`` replaces that fraction of arithmetic answers with a wrong
    integer, mimicking a corpus with mislabeled items.
    """
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(n):
        if rng.random() < copy_fraction:
            noise = rng.integers(0, vocab.n_digits, size=2)
            span = rng.integers(0, vocab.n_digits, size=copy_span)
            tasks.append(make_copy_task(noise.tolist(), span.tolist(), vocab))
            continue
        m = int(rng.choice(moduli))
        x, y = (int(v) for v in rng.integers(0, vocab.n_digits, size=2))
        task = make_mod_task(x, y, m, vocab)
        if rng.random() < label_noise:
            wrong = (task.answer + 1 + int(rng.integers(0, m - 1))) % m
            task = TaskInstance(task.prompt, wrong)
        tasks.append(task)
    return tasks


def _answer_text(answer: Answer) -> str:
    if isinstance(answer, tuple):
        return "[" + " ".join(str(t) for t in answer) + "]"
    return str(int(answer))


def _parse_answer(text: str) -> Answer:
    text = text.strip()
    if text.startswith("["):
        return tuple(int(t) for t in text.strip("[]").split())
    return int(text)


def write_tasks(path: str | Path, tasks: Iterable[TaskInstance], header: str = "") -> None:
    lines = [f"# {header}"] if header else []
    for t in tasks:
        lines.append("\t".join([" ".join(str(x) for x in t.prompt), _answer_text(t.answer), t.format_rule]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tasks(path: str | Path) -> list[TaskInstance]:
    tasks = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        prompt = tuple(int(x) for x in fields[0].split())
        tasks.append(TaskInstance(prompt, _parse_answer(fields[1]), fields[2].strip()))
    return tasks
