"""Behavioural metrics over (problem, trajectory) corpora with known ground truth.

Every ratio keeps its numerator and denominator; a zero denominator gives an
undefined value (``None``), never 0.
"""

from __future__ import annotations

import csv
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import Problem
from .policy import PolicyParams, sample
from .trajectory import DEFAULT_K_MAX, StepKind, Trajectory, Verdict

Corpus = Sequence[tuple[Problem, Trajectory]]


@dataclass(frozen=True)
class Ratio:
    numerator: int
    denominator: int

    @property
    def value(self) -> float | None:
        return self.numerator / self.denominator if self.denominator else None

    def to_dict(self) -> dict:
        return {"value": self.value, "numerator": self.numerator, "denominator": self.denominator}

    @classmethod
    def from_dict(cls, d: dict) -> Ratio:
        return cls(int(d["numerator"]), int(d["denominator"]))


@dataclass(frozen=True)
class LevelRow:
    level: int
    trajectories: int
    correct: int
    rectify_steps: int

    @property
    def answer_accuracy(self) -> float:
        return self.correct / self.trajectories

    @property
    def mean_loops(self) -> float:
        return self.rectify_steps / self.trajectories

    @property
    def mean_attempts(self) -> float:
        return self.mean_loops + 1.0

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "trajectories": self.trajectories,
            "correct": self.correct,
            "rectify_steps": self.rectify_steps,
            "answer_accuracy": self.answer_accuracy,
            "mean_attempts": self.mean_attempts,
            "mean_loops": self.mean_loops,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LevelRow:
        return cls(int(d["level"]), int(d["trajectories"]), int(d["correct"]), int(d["rectify_steps"]))


@dataclass(frozen=True)
class BehaviorReport:
    verification_accuracy: Ratio
    error_recall: Ratio
    error_to_correct: Ratio
    correct_to_error: Ratio
    levels: tuple[LevelRow, ...] = field(default_factory=tuple)

    def level(self, level: int) -> LevelRow | None:
        return next((r for r in self.levels if r.level == level), None)

    def to_dict(self) -> dict:
        return {
            "verification_accuracy": self.verification_accuracy.to_dict(),
            "error_recall": self.error_recall.to_dict(),
            "error_to_correct": self.error_to_correct.to_dict(),
            "correct_to_error": self.correct_to_error.to_dict(),
            "levels": [r.to_dict() for r in self.levels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> BehaviorReport:
        return cls(
            Ratio.from_dict(d["verification_accuracy"]),
            Ratio.from_dict(d["error_recall"]),
            Ratio.from_dict(d["error_to_correct"]),
            Ratio.from_dict(d["correct_to_error"]),
            tuple(LevelRow.from_dict(r) for r in d["levels"]),
        )


def verification_metrics(corpus: Corpus) -> tuple[Ratio, Ratio]:
    """(verification accuracy, error recall); truth of a verdict is the grade of the preceding answer."""
    matched = total = flagged = wrong = 0
    for p, y in corpus:
        last = None
        for step in y.steps:
            if step.answer is not None:
                last = step.answer
                continue
            if step.kind is not StepKind.VERIFY or last is None:
                continue
            right = last == p.gt_answer
            says_correct = step.verdict is Verdict.CORRECT
            total += 1
            matched += says_correct == right
            if not right:
                wrong += 1
                flagged += not says_correct
    return Ratio(matched, total), Ratio(flagged, wrong)


def rectification_metrics(corpus: Corpus) -> tuple[Ratio, Ratio]:
    """(error-to-correct, correct-to-error) over RECTIFY steps, each judged against the answer it replaced."""
    fixed = from_wrong = broke = from_right = 0
    for p, y in corpus:
        last = None
        for step in y.steps:
            if step.kind is StepKind.RECTIFY and last is not None:
                if last == p.gt_answer:
                    from_right += 1
                    broke += step.answer != p.gt_answer
                else:
                    from_wrong += 1
                    fixed += step.answer == p.gt_answer
            if step.answer is not None:
                last = step.answer
    return Ratio(fixed, from_wrong), Ratio(broke, from_right)


def difficulty_profile(corpus: Corpus) -> tuple[LevelRow, ...]:
    counts: dict[int, list[int]] = {}
    for p, y in corpus:
        row = counts.setdefault(p.level, [0, 0, 0])
        row[0] += 1
        row[1] += y.final_answer == p.gt_answer
        row[2] += y.k
    return tuple(LevelRow(lv, *counts[lv]) for lv in sorted(counts))


def behavior_report(corpus: Corpus) -> BehaviorReport:
    va, er = verification_metrics(corpus)
    e2c, c2e = rectification_metrics(corpus)
    return BehaviorReport(va, er, e2c, c2e, difficulty_profile(corpus))


RATIO_NAMES = ("verification_accuracy", "error_recall", "error_to_correct", "correct_to_error")
CSV_FIELDS = (
    "row", "level", "trajectories", "correct", "rectify_steps", "answer_accuracy", "mean_attempts", "mean_loops",
    *(f"{n}{suffix}" for n in RATIO_NAMES for suffix in ("", "_num", "_den")),
)


def emit_report(report: BehaviorReport, path: str | Path, fmt: str | None = None) -> Path:
    """Write ``report`` as json or csv (one row per populated level plus a summary row)."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for r in report.levels:
                writer.writerow({"row": "level", **r.to_dict()})
            summary = {"row": "summary"}
            n = sum(r.trajectories for r in report.levels)
            if n:
                summary.update(
                    trajectories=n,
                    correct=sum(r.correct for r in report.levels),
                    rectify_steps=sum(r.rectify_steps for r in report.levels),
                )
                summary["answer_accuracy"] = summary["correct"] / n
                summary["mean_loops"] = summary["rectify_steps"] / n
                summary["mean_attempts"] = summary["mean_loops"] + 1.0
            for name in RATIO_NAMES:
                ratio: Ratio = getattr(report, name)
                summary[name] = "" if ratio.value is None else ratio.value
                summary[f"{name}_num"] = ratio.numerator
                summary[f"{name}_den"] = ratio.denominator
            writer.writerow(summary)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path: str | Path) -> BehaviorReport:
    return BehaviorReport.from_dict(json.loads(Path(path).read_text()))


def write_plot_table(rows: Iterable[tuple[str, LevelRow]], path: str | Path) -> None:
    """Level vs. answer accuracy and attempts, one row per (policy, level)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["policy", "level", "answer_accuracy", "mean_attempts", "mean_loops", "trajectories"])
        for name, r in rows:
            writer.writerow([name, r.level, r.answer_accuracy, r.mean_attempts, r.mean_loops, r.trajectories])


def policy_corpus(
    params: PolicyParams,
    problems: Sequence[Problem],
    samples_per_problem: int,
    seed: int,
    k_max: int = DEFAULT_K_MAX,
) -> list[tuple[Problem, Trajectory]]:
    """Sampled trajectories; each problem draws from its own stream so corpora built
    from different params with the same seed use common random numbers."""
    streams = np.random.SeedSequence(seed).spawn(len(problems))
    corpus = []
    for p, ss in zip(problems, streams):
        rng = np.random.default_rng(ss)
        corpus.extend((p, sample(params, p, rng, k_max)) for _ in range(samples_per_problem))
    return corpus

