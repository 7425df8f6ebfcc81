"""Stage 1: self-correction SFT records and seed preference pairs."""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dpo import PreferencePair, write_pairs
from .env import N_LEVELS, Problem, grade
from .oracles import GeneratorOracle, RemoteError, TeacherScore
from .trajectory import (
    DEFAULT_K_MAX,
    RECHECK_PHRASE,
    RETRY_PHRASE,
    AutomatonMode,
    Step,
    StepKind,
    Trajectory,
    TrajectoryError,
    Verdict,
    VerifyStrategy,
    parse,
    render,
)

log = logging.getLogger(__name__)

CHOSEN, REJECTED = "chosen", "rejected"
WRONG_FINAL, CORRUPTED = "wrong_final", "corrupted"

# lower edge of the accuracy band for levels 1..4; anything lower is level 5
LEVEL_THRESHOLDS = (0.8, 0.6, 0.4, 0.2)


class ConstructionFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SftRecord:
    problem_id: str
    trajectory: Trajectory
    label: str
    level: int
    k: int
    text: str
    mode: str | None = None  # rejected construction mode

    @property
    def final_answer(self) -> str | None:
        return self.trajectory.final_answer

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "label": self.label,
            "level": self.level,
            "k": self.k,
            "trajectory_text": self.text,
            "final_answer": self.final_answer,
        }


def estimate_accuracy(p: Problem, gen: GeneratorOracle, m: int, rng: np.random.Generator) -> float:
    if m < 1:
        raise ValueError("need at least one sample")
    hits = sum(grade(p, gen.solve(p, (), rng).answer) for _ in range(m))
    return hits / m


def assign_level(acc: float) -> int:
    if not 0.0 <= acc <= 1.0:
        raise ValueError(f"accuracy must be in [0, 1], got {acc}")
    for level, lower in enumerate(LEVEL_THRESHOLDS, start=1):
        if acc >= lower:
            return level
    return N_LEVELS


def target_cycles(level: int) -> int:
    if not 1 <= level <= N_LEVELS:
        raise ValueError(f"level must be in 1..{N_LEVELS}")
    return level - 1


def _random_strategy(rng: np.random.Generator) -> VerifyStrategy:
    return (VerifyStrategy.DIRECT_DERIVATION, VerifyStrategy.CONTRADICTION)[int(rng.integers(2))]


class _Budget:
    def __init__(self, max_retries: int, problem_id: str):
        self.left = max_retries
        self.problem_id = problem_id
        self.discarded = 0

    def spend(self, why: str) -> None:
        self.discarded += 1
        self.left -= 1
        if self.left < 0:
            raise ConstructionFailure(f"{self.problem_id}: retry budget exhausted ({why})")


def _draw(budget: _Budget, why: str, make: Callable[[], Step], ok: Callable[[Step], bool]) -> Step:
    while True:
        try:
            step = make()
        except RemoteError as exc:
            budget.spend(f"remote: {exc}")
            continue
        if ok(step):
            return step
        budget.spend(why)


def build_chosen(
    p: Problem,
    gen: GeneratorOracle,
    k_target: int,
    rng: np.random.Generator,
    max_retries: int = 64,
    *,
    k_max: int = DEFAULT_K_MAX,
    level: int | None = None,
) -> SftRecord:
    """A CANONICAL trajectory with exactly ``k_target`` rectifications ending on the ground truth.

    Every intermediate answer is wrong and flagged INCORRECT; the last answer is
    correct and verified CORRECT. Oracle drafts that do not fit are discarded and
    redrawn, up to ``max_retries`` discards in total.
    """
    if not 0 <= k_target <= k_max:
        raise ValueError(f"k_target must be in 0..{k_max}")
    budget = _Budget(max_retries, p.id)
    steps: list[Step] = []
    for cycle in range(k_target + 1):
        want_right = cycle == k_target
        hint = f"The reference answer is {p.gt_answer}. " + (
            "End this attempt with the reference answer." if want_right else "This attempt should end with a plausible wrong answer."
        )
        history = tuple(steps)
        if cycle == 0:
            make = lambda: gen.solve(p, history, rng, hint=hint)  # noqa: E731
        else:
            make = lambda: gen.rectify(p, history, rng, hint=hint)  # noqa: E731
        answer_step = _draw(
            budget, "answer correctness", make, lambda s: s.answer is not None and grade(p, s.answer) == want_right
        )
        steps.append(answer_step)
        strategy = _random_strategy(rng)
        verdict = Verdict.CORRECT if want_right else Verdict.INCORRECT
        history = tuple(steps)
        verify_step = _draw(
            budget,
            "verdict",
            lambda: gen.verify(
                p, answer_step.answer, strategy, rng, history=history, hint=f"The reference answer is {p.gt_answer}."
            ),
            lambda s: s.verdict is verdict,
        )
        steps.append(verify_step)
    traj = Trajectory(p.id, tuple(steps))
    text = render(traj)
    try:
        parse(text, p.id, AutomatonMode.CANONICAL, k_max)
    except TrajectoryError as exc:
        raise ConstructionFailure(f"{p.id}: chosen trajectory failed the format filter: {exc}") from exc
    return SftRecord(p.id, traj, CHOSEN, p.level if level is None else level, traj.k, text)


def _forced(step: Step, verdict: Verdict) -> Step:
    if step.verdict is verdict:
        return step
    return Step(StepKind.VERIFY, step.text, verdict=verdict, strategy=step.strategy)


def _wrong_final_trajectory(
    p: Problem, gen: GeneratorOracle, k: int, rng: np.random.Generator, max_retries: int
) -> Trajectory:
    wrong = [a for a in p.answer_space if a != p.gt_answer]
    budget = _Budget(max_retries, p.id)
    steps: list[Step] = []
    for cycle in range(k + 1):
        history = tuple(steps)
        kind = StepKind.SOLVE if cycle == 0 else StepKind.RECTIFY
        make = (lambda: gen.solve(p, history, rng)) if cycle == 0 else (lambda: gen.rectify(p, history, rng))
        try:
            step = _draw(budget, "answer correctness", make, lambda s: s.answer is not None and s.answer != p.gt_answer)
        except ConstructionFailure:
            step = Step(kind, "", answer=wrong[int(rng.integers(len(wrong)))])
        steps.append(step)
        strategy = _random_strategy(rng)
        try:
            v = gen.verify(p, step.answer, strategy, rng, history=tuple(steps))
        except RemoteError:
            v = Step(StepKind.VERIFY, "", verdict=Verdict.CORRECT, strategy=strategy)
        steps.append(_forced(v, Verdict.CORRECT if cycle == k else Verdict.INCORRECT))
    return Trajectory(p.id, tuple(steps))


def drop_phrase(text: str, rng: np.random.Generator) -> str:
    """Remove one connective phrase occurrence, chosen uniformly."""
    spots = []
    for phrase in (RECHECK_PHRASE, RETRY_PHRASE):
        start = text.find(phrase)
        while start >= 0:
            spots.append((start, len(phrase) + 1))  # phrase and its trailing newline
            start = text.find(phrase, start + 1)
    if not spots:
        return text
    start, length = sorted(spots)[int(rng.integers(len(spots)))]
    return text[:start] + text[start + length:]


def build_rejected(
    p: Problem,
    gen: GeneratorOracle,
    rng: np.random.Generator,
    *,
    k_target: int | None = None,
    k_max: int = DEFAULT_K_MAX,
    level: int | None = None,
    max_retries: int = 64,
    mode: str | None = None,
) -> SftRecord:
    """A dispreferred record: either a valid trajectory ending on a wrong answer that
    was verified CORRECT, or a rendered trajectory with one connective phrase dropped.

    The number of correction cycles is uniform on 0..k_target (default: from the level).
    """
    level = p.level if level is None else level
    k_target = target_cycles(level) if k_target is None else min(k_target, k_max)
    if mode is None:
        mode = (WRONG_FINAL, CORRUPTED)[int(rng.integers(2))]
    if len(p.answer_space) < 2:
        mode = CORRUPTED
    k = int(rng.integers(k_target + 1))
    if mode == WRONG_FINAL:
        traj = _wrong_final_trajectory(p, gen, k, rng, max_retries)
        text = render(traj)
    else:
        if len(p.answer_space) < 2:
            traj = Trajectory(p.id, (Step(StepKind.SOLVE, "", answer=p.gt_answer), Step(StepKind.VERIFY, "", verdict=Verdict.CORRECT)))
        else:
            traj = _wrong_final_trajectory(p, gen, k, rng, max_retries)
        text = drop_phrase(render(traj), rng)
    return SftRecord(p.id, traj, REJECTED, level, traj.k, text, mode)


def simulate_trajectory(
    p: Problem, gen: GeneratorOracle, rng: np.random.Generator, k_max: int = DEFAULT_K_MAX
) -> Trajectory:
    """An unforced correction loop: the oracle's own verdicts decide when to stop."""
    steps = [gen.solve(p, (), rng)]
    while True:
        v = gen.verify(p, steps[-1].answer, _random_strategy(rng), rng, history=tuple(steps))
        steps.append(v)
        k = sum(1 for s in steps if s.kind is StepKind.RECTIFY)
        if v.verdict is Verdict.CORRECT or k >= k_max:
            return Trajectory(p.id, tuple(steps))
        steps.append(gen.rectify(p, tuple(steps), rng))


# --------------------------------------------------------------------------- corpus


@dataclass
class CorpusStats:
    problems: int = 0
    chosen: int = 0
    rejected: int = 0
    corrupted: int = 0
    failures: list[str] = field(default_factory=list)
    level_counts: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def build_problem_records(
    p: Problem,
    gen: GeneratorOracle,
    rng: np.random.Generator,
    *,
    accuracy_samples: int = 16,
    max_retries: int = 64,
    rejected_attempts: int = 8,
    k_max: int = DEFAULT_K_MAX,
) -> list[SftRecord]:
    """Chosen record plus rejected draws for one problem. Rejected records are drawn until one is
    usable as a preference pair (valid text), at most ``rejected_attempts`` times."""
    level = assign_level(estimate_accuracy(p, gen, accuracy_samples, rng))
    k_target = min(target_cycles(level), k_max)
    records = [build_chosen(p, gen, k_target, rng, max_retries, k_max=k_max, level=level)]
    for _ in range(rejected_attempts):
        rec = build_rejected(p, gen, rng, k_target=k_target, k_max=k_max, level=level, max_retries=max_retries)
        records.append(rec)
        if rec.mode == WRONG_FINAL:
            break
    return records


def build_corpus(
    problems: Sequence[Problem],
    gen: GeneratorOracle,
    seed: int,
    *,
    jobs: int = 1,
    **kwargs,
) -> tuple[list[SftRecord], CorpusStats]:
    """Records for every problem. Each problem gets its own spawned RNG stream, so the
    result does not depend on ``jobs``."""
    streams = np.random.SeedSequence(seed).spawn(len(problems))

    def one(i: int):
        try:
            return build_problem_records(problems[i], gen, np.random.default_rng(streams[i]), **kwargs)
        except ConstructionFailure as exc:
            return exc

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, range(len(problems))))
    else:
        results = [one(i) for i in range(len(problems))]
    stats = CorpusStats(problems=len(problems))
    records: list[SftRecord] = []
    for res in results:
        if isinstance(res, ConstructionFailure):
            log.warning("%s", res)
            stats.failures.append(str(res))
            continue
        records.extend(res)
    for r in records:
        if r.label == CHOSEN:
            stats.chosen += 1
            stats.level_counts[r.level] = stats.level_counts.get(r.level, 0) + 1
        else:
            stats.rejected += 1
            stats.corrupted += r.mode == CORRUPTED
    return records, stats


def _parses(rec: SftRecord, k_max: int) -> bool:
    try:
        parse(rec.text, rec.problem_id, AutomatonMode.CANONICAL, k_max)
    except TrajectoryError:
        return False
    return True


def seed_pairs(
    records: Iterable[SftRecord],
    problems: Mapping[str, Problem],
    teacher: Callable[[Problem, Trajectory], TeacherScore],
    k_max: int = DEFAULT_K_MAX,
) -> list[PreferencePair]:
    """Pair every chosen record with the first usable rejected record of the same problem.

    Rejected records whose text does not parse carry no trajectory a policy could
    score, so they never enter a pair.
    """
    records = list(records)
    losers: dict[str, SftRecord] = {}
    for r in records:
        if r.label == REJECTED and r.problem_id not in losers and _parses(r, k_max):
            losers[r.problem_id] = r
    pairs = []
    for r in records:
        if r.label != CHOSEN or r.problem_id not in losers:
            continue
        lose = losers[r.problem_id]
        if lose.trajectory == r.trajectory:
            continue
        p = problems[r.problem_id]
        margin = teacher(p, r.trajectory).total - teacher(p, lose.trajectory).total
        if margin < 0:
            continue
        pairs.append(PreferencePair(r.problem_id, r.trajectory, lose.trajectory, margin, "seed", 0))
    return pairs


def write_sft(path: str | Path, records: Iterable[SftRecord]) -> None:
    with open(path, "w") as f:
        for r in records:
            if r.label == CHOSEN:
                f.write(json.dumps(r.to_dict()) + "\n")


def read_sft(path: str | Path, k_max: int = DEFAULT_K_MAX) -> list[SftRecord]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            traj = parse(d["trajectory_text"], d["problem_id"], AutomatonMode.CANONICAL, k_max)
            out.append(SftRecord(d["problem_id"], traj, d["label"], int(d["level"]), int(d["k"]), d["trajectory_text"]))
    return out


def emit_datasets(
    records: Sequence[SftRecord],
    out_dir: str | Path,
    problems: Mapping[str, Problem],
    teacher: Callable[[Problem, Trajectory], TeacherScore],
    k_max: int = DEFAULT_K_MAX,
) -> list[PreferencePair]:
    """Write sft.jsonl (chosen only) and seed_pairs.jsonl into ``out_dir``."""
    out = Path(out_dir)
    pairs = seed_pairs(records, problems, teacher, k_max)
    write_sft(out / "sft.jsonl", records)
    write_pairs(out / "seed_pairs.jsonl", pairs)
    return pairs
