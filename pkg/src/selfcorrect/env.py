"""Synthetic problem domain with known ground truth and five difficulty levels."""

from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

N_LEVELS = 5
DEFAULT_SOLVER_ACCURACY = (0.9, 0.75, 0.6, 0.4, 0.2)


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    answer_space: tuple[str, ...]
    gt_answer: str
    level: int
    attachment_ref: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "answer_space", tuple(self.answer_space))
        if self.gt_answer not in self.answer_space:
            raise ValueError(f"gt_answer {self.gt_answer!r} not in answer space")
        if not 1 <= self.level <= N_LEVELS:
            raise ValueError(f"level must be in 1..{N_LEVELS}, got {self.level}")

    @property
    def gt_index(self) -> int:
        return self.answer_space.index(self.gt_answer)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["answer_space"] = list(self.answer_space)
        if d["attachment_ref"] is None:
            del d["attachment_ref"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Problem:
        return cls(
            id=d["id"],
            statement=d["statement"],
            answer_space=tuple(d["answer_space"]),
            gt_answer=d["gt_answer"],
            level=int(d["level"]),
            attachment_ref=d.get("attachment_ref"),
        )


@dataclass(frozen=True)
class Confusion:
    """Probability that a verifier says CORRECT, split by whether the answer really is correct."""

    p_correct_given_right: float
    p_correct_given_wrong: float

    @property
    def error_recall(self) -> float:
        return 1.0 - self.p_correct_given_wrong


DEFAULT_CONFUSION = {
    "direct": Confusion(p_correct_given_right=0.95, p_correct_given_wrong=0.40),
    "contradiction": Confusion(p_correct_given_right=0.85, p_correct_given_wrong=0.15),
}


@dataclass(frozen=True)
class EnvConfig:
    A: int = 5
    counts_per_level: tuple[int, ...] = (10, 10, 10, 10, 10)
    solver_accuracy: tuple[float, ...] = DEFAULT_SOLVER_ACCURACY
    verifier_confusion: dict[str, Confusion] = field(default_factory=lambda: dict(DEFAULT_CONFUSION))
    seed: int = 0

    def __post_init__(self) -> None:
        if self.A < 1:
            raise ValueError("answer space must be non-empty")
        if len(self.counts_per_level) != N_LEVELS or len(self.solver_accuracy) != N_LEVELS:
            raise ValueError(f"need exactly {N_LEVELS} counts and accuracies")
        if any(c < 0 for c in self.counts_per_level):
            raise ValueError("counts must be >= 0")
        probs = list(self.solver_accuracy)
        for c in self.verifier_confusion.values():
            probs += [c.p_correct_given_right, c.p_correct_given_wrong]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")

    def accuracy(self, level: int) -> float:
        return self.solver_accuracy[level - 1]


def answer_space(A: int) -> tuple[str, ...]:
    return tuple(str(i) for i in range(A))


def gen_problems(config: EnvConfig) -> list[Problem]:
    rng = np.random.default_rng(config.seed)
    space = answer_space(config.A)
    problems = []
    for level, count in enumerate(config.counts_per_level, start=1):
        for _ in range(count):
            x, c = (int(v) for v in rng.integers(0, 1000, size=2))
            gt = space[int(rng.integers(config.A))]
            pid = f"p{len(problems):04d}"
            problems.append(
                Problem(
                    id=pid,
                    statement=f"Let f(x) = {c}x + {gt}. Compute f({x * config.A}) mod {config.A}.",
                    answer_space=space,
                    gt_answer=gt,
                    level=level,
                )
            )
    return problems


def grade(p: Problem, answer: str) -> bool:
    if answer not in p.answer_space:
        raise ValueError(f"answer {answer!r} is outside the answer space of {p.id}")
    return answer == p.gt_answer


def write_problems(path: str | Path, problems: Iterable[Problem]) -> None:
    with open(path, "w") as f:
        for p in problems:
            f.write(json.dumps(p.to_dict()) + "\n")


def read_problems(path: str | Path) -> list[Problem]:
    with open(path) as f:
        return [Problem.from_dict(json.loads(line)) for line in f if line.strip()]
