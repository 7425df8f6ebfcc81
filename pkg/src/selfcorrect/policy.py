"""Log-linear autoregressive policy over trajectory decisions.

A CANONICAL trajectory is generated by two kinds of decisions: picking an answer
(at SOLVE and RECTIFY steps) and picking a verdict (at VERIFY steps). Step kinds
themselves are forced by the automaton and cost nothing. Each decision is a
softmax over ``w . phi(context, candidate)``, so log-probabilities, gradients and
the full trajectory distribution are exact.
"""

from __future__ import annotations

import functools
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .env import N_LEVELS, Problem
from .trajectory import (
    DEFAULT_K_MAX,
    AutomatonMode,
    Step,
    StepKind,
    Trajectory,
    Verdict,
    VerifyStrategy,
    validate,
)

MAX_ENUMERATION = 100_000

SOLVE_TEXT = "Let me work this out.\n"
RECTIFY_TEXT = "Let me redo the computation.\n"
VERIFY_TEXT = "Checking the previous answer.\n"


class DecisionState(str, Enum):
    SOLVE = "solve"
    RECTIFY = "rectify"
    VERIFY_SOLVE = "verify_solve"
    VERIFY_RECTIFY = "verify_rectify"


VERDICTS = (Verdict.CORRECT, Verdict.INCORRECT)


class FeatureSpace:
    """Feature names and index lookup for an answer space of size A.

    Families: candidate identity; automaton state x candidate class; level x
    candidate class; previous-answer correctness x verdict. An answer candidate's
    class is whether it is the ground truth.
    """

    def __init__(self, A: int):
        self.A = A
        names = [f"id:ans={j}" for j in range(A)]
        names += [f"id:verdict={v.value}" for v in VERDICTS]
        names += [f"state={s.value}:ans={c}" for s in (DecisionState.SOLVE, DecisionState.RECTIFY) for c in ("gt", "wrong")]
        names += [
            f"state={s.value}:verdict={v.value}"
            for s in (DecisionState.VERIFY_SOLVE, DecisionState.VERIFY_RECTIFY)
            for v in VERDICTS
        ]
        names += [f"level={lv}:ans={c}" for lv in range(1, N_LEVELS + 1) for c in ("gt", "wrong")]
        names += [f"level={lv}:verdict={v.value}" for lv in range(1, N_LEVELS + 1) for v in VERDICTS]
        names += [f"prev={r}:verdict={v.value}" for r in ("right", "wrong") for v in VERDICTS]
        self.names: tuple[str, ...] = tuple(names)
        self.index = {n: i for i, n in enumerate(names)}

    @property
    def dim(self) -> int:
        return len(self.names)

    def __repr__(self) -> str:
        return f"FeatureSpace(A={self.A})"

    @functools.lru_cache(maxsize=None)
    def answer_phi(self, state: DecisionState, level: int, gt_index: int) -> np.ndarray:
        phi = np.zeros((self.A, self.dim))
        for j in range(self.A):
            cls = "gt" if j == gt_index else "wrong"
            for name in (f"id:ans={j}", f"state={state.value}:ans={cls}", f"level={level}:ans={cls}"):
                phi[j, self.index[name]] = 1.0
        phi.flags.writeable = False
        return phi

    @functools.lru_cache(maxsize=None)
    def verdict_phi(self, state: DecisionState, level: int, prev_right: bool) -> np.ndarray:
        phi = np.zeros((len(VERDICTS), self.dim))
        prev = "right" if prev_right else "wrong"
        for j, v in enumerate(VERDICTS):
            for name in (
                f"id:verdict={v.value}",
                f"state={state.value}:verdict={v.value}",
                f"level={level}:verdict={v.value}",
                f"prev={prev}:verdict={v.value}",
            ):
                phi[j, self.index[name]] = 1.0
        phi.flags.writeable = False
        return phi


@functools.lru_cache(maxsize=None)
def feature_space(A: int) -> FeatureSpace:
    return FeatureSpace(A)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    space: FeatureSpace
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.space.dim,):
            raise ValueError(f"expected {self.space.dim} weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, A: int) -> PolicyParams:
        space = feature_space(A)
        return cls(space, np.zeros(space.dim))

    def replace(self, weights: np.ndarray) -> PolicyParams:
        return PolicyParams(self.space, weights)

    def with_weight(self, name: str, value: float) -> PolicyParams:
        w = self.weights.copy()
        w[self.space.index[name]] = value
        return self.replace(w)

    def __getitem__(self, name: str) -> float:
        return float(self.weights[self.space.index[name]])

    def to_dict(self) -> dict[str, float]:
        return {n: float(x) for n, x in zip(self.space.names, self.weights)}

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> PolicyParams:
        A = sum(1 for n in d if n.startswith("id:ans="))
        space = feature_space(A)
        unknown = set(d) - set(space.names)
        if unknown:
            raise ValueError(f"unknown features in checkpoint: {sorted(unknown)}")
        return cls(space, np.array([float(d.get(n, 0.0)) for n in space.names]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> PolicyParams:
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- compiled decisions


@dataclass(frozen=True, eq=False)
class Compiled:
    """All decisions of one trajectory stacked into a single candidate matrix."""

    phi: np.ndarray        # (rows, dim) one row per candidate of every decision
    starts: np.ndarray     # first row of each decision
    seg: np.ndarray        # decision index of every row
    chosen: np.ndarray     # row of the realized candidate, per decision
    masked: np.ndarray     # 1 where the decision sits in a VERIFY/RECTIFY step


def _decisions(space: FeatureSpace, p: Problem, y: Trajectory):
    prev_right = False
    prev_kind = None
    for step in y.steps:
        if step.kind is StepKind.VERIFY:
            state = DecisionState.VERIFY_SOLVE if prev_kind is StepKind.SOLVE else DecisionState.VERIFY_RECTIFY
            yield space.verdict_phi(state, p.level, prev_right), VERDICTS.index(step.verdict), 1
        else:
            state = DecisionState.SOLVE if step.kind is StepKind.SOLVE else DecisionState.RECTIFY
            yield space.answer_phi(state, p.level, p.gt_index), p.answer_space.index(step.answer), int(
                step.kind is StepKind.RECTIFY
            )
            prev_right = step.answer == p.gt_answer
        prev_kind = step.kind


@functools.lru_cache(maxsize=200_000)
def compile_trajectory(A: int, p: Problem, y: Trajectory, k_max: int = DEFAULT_K_MAX) -> Compiled:
    if len(p.answer_space) != A:
        raise ValueError(f"problem {p.id} has {len(p.answer_space)} answers, policy expects {A}")
    validate(y, AutomatonMode.CANONICAL, k_max)
    space = feature_space(A)
    blocks, starts, chosen, masked = [], [], [], []
    row = 0
    for phi, idx, bit in _decisions(space, p, y):
        blocks.append(phi)
        starts.append(row)
        chosen.append(row + idx)
        masked.append(bit)
        row += phi.shape[0]
    phi = np.vstack(blocks)
    sizes = np.diff(np.append(starts, row))
    out = Compiled(
        phi=phi,
        starts=np.array(starts),
        seg=np.repeat(np.arange(len(starts)), sizes),
        chosen=np.array(chosen),
        masked=np.array(masked, dtype=np.float64),
    )
    for arr in (out.phi, out.starts, out.seg, out.chosen, out.masked):
        arr.flags.writeable = False
    return out


def _weighted_logprob_and_grad(w: np.ndarray, c: Compiled, dec_weights: np.ndarray | None):
    logits = c.phi @ w
    m = np.maximum.reduceat(logits, c.starts)
    ex = np.exp(logits - m[c.seg])
    z = np.add.reduceat(ex, c.starts)
    log_p = logits[c.chosen] - m - np.log(z)
    probs = ex / z[c.seg]
    dw = np.ones(len(c.starts)) if dec_weights is None else dec_weights
    coef = -probs * dw[c.seg]
    coef[c.chosen] += dw
    return float(dw @ log_p), c.phi.T @ coef


def logprob_and_grad(params: PolicyParams, p: Problem, y: Trajectory, k_max: int = DEFAULT_K_MAX):
    c = compile_trajectory(params.space.A, p, y, k_max)
    return _weighted_logprob_and_grad(params.weights, c, None)


def logprob(params: PolicyParams, p: Problem, y: Trajectory, k_max: int = DEFAULT_K_MAX) -> float:
    return logprob_and_grad(params, p, y, k_max)[0]


def grad_logprob(params: PolicyParams, p: Problem, y: Trajectory, k_max: int = DEFAULT_K_MAX) -> np.ndarray:
    return logprob_and_grad(params, p, y, k_max)[1]


def decision_count(y: Trajectory) -> int:
    return len(y.steps)


# --------------------------------------------------------------------------- sampling / enumeration


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def sample(params: PolicyParams, p: Problem, rng: np.random.Generator, k_max: int = DEFAULT_K_MAX) -> Trajectory:
    """Ancestral sample through the CANONICAL automaton; VERIFY strategies are drawn uniformly."""
    space, w = params.space, params.weights
    strategies = tuple(VerifyStrategy)
    steps: list[Step] = []

    def pick(phi: np.ndarray) -> int:
        cdf = np.cumsum(_softmax(phi @ w))
        return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), phi.shape[0] - 1)

    kind = StepKind.SOLVE
    while True:
        state = DecisionState.SOLVE if kind is StepKind.SOLVE else DecisionState.RECTIFY
        answer = p.answer_space[pick(space.answer_phi(state, p.level, p.gt_index))]
        steps.append(Step(kind, SOLVE_TEXT if kind is StepKind.SOLVE else RECTIFY_TEXT, answer=answer))
        vstate = DecisionState.VERIFY_SOLVE if kind is StepKind.SOLVE else DecisionState.VERIFY_RECTIFY
        verdict = VERDICTS[pick(space.verdict_phi(vstate, p.level, answer == p.gt_answer))]
        strategy = strategies[int(rng.integers(len(strategies)))]
        steps.append(Step(StepKind.VERIFY, VERIFY_TEXT, verdict=verdict, strategy=strategy))
        rectified = len(steps) // 2 - 1
        if verdict is Verdict.CORRECT or rectified >= k_max:
            return Trajectory(p.id, tuple(steps))
        kind = StepKind.RECTIFY


def count_trajectories(A: int, k_max: int) -> int:
    """Size of the CANONICAL language: A^(k+1) paths ending CORRECT for each k < k_max,
    plus 2 A^(k_max+1) paths of the capped length."""
    return sum(A ** (k + 1) for k in range(k_max)) + 2 * A ** (k_max + 1)


def enumerate_trajectories(
    p: Problem,
    k_max: int = DEFAULT_K_MAX,
    strategy: VerifyStrategy = VerifyStrategy.DIRECT_DERIVATION,
    limit: int = MAX_ENUMERATION,
) -> list[Trajectory]:
    """Every complete CANONICAL trajectory for ``p`` (VERIFY strategies fixed to ``strategy``)."""
    total = count_trajectories(len(p.answer_space), k_max)
    if total > limit:
        raise OverflowError(f"{total} trajectories exceed the enumeration limit {limit}")
    out: list[Trajectory] = []

    def extend(prefix: tuple[Step, ...], kind: StepKind, rectified: int) -> None:
        text = SOLVE_TEXT if kind is StepKind.SOLVE else RECTIFY_TEXT
        for a in p.answer_space:
            head = prefix + (Step(kind, text, answer=a),)
            for v in VERDICTS:
                steps = head + (Step(StepKind.VERIFY, VERIFY_TEXT, verdict=v, strategy=strategy),)
                if v is Verdict.CORRECT or rectified >= k_max:
                    out.append(Trajectory(p.id, steps))
                else:
                    extend(steps, StepKind.RECTIFY, rectified + 1)

    extend((), StepKind.SOLVE, 0)
    return out


# --------------------------------------------------------------------------- SFT


def sft_loss(
    params: PolicyParams,
    problems: Mapping[str, Problem],
    trajectories: Sequence[Trajectory],
    mask_weight: float = 1.0,
    k_max: int = DEFAULT_K_MAX,
) -> tuple[float, np.ndarray]:
    """Summed negative log-likelihood; decisions inside VERIFY/RECTIFY steps weigh ``mask_weight``."""
    if mask_weight < 0:
        raise ValueError("mask_weight must be >= 0")
    if not trajectories:
        raise ValueError("empty SFT dataset")
    loss = 0.0
    grad = np.zeros(params.space.dim)
    for y in trajectories:
        c = compile_trajectory(params.space.A, problems[y.problem_id], y, k_max)
        dec_w = 1.0 + (mask_weight - 1.0) * c.masked
        lp, g = _weighted_logprob_and_grad(params.weights, c, dec_w)
        loss -= lp
        grad -= g
    return loss, grad


def sft_weight_total(trajectories: Sequence[Trajectory], mask_weight: float = 1.0) -> float:
    """Total decision weight of a corpus: the normaliser for per-decision loss."""
    total = 0.0
    for y in trajectories:
        for step in y.steps:
            total += 1.0 if step.kind is StepKind.SOLVE else mask_weight
    return total


def gd_step(params: PolicyParams, grad: np.ndarray, lr: float) -> PolicyParams:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return params.replace(params.weights - lr * grad)


def train_sft(
    params: PolicyParams,
    problems: Mapping[str, Problem],
    trajectories: Sequence[Trajectory],
    lr: float = 0.1,
    steps: int = 500,
    mask_weight: float = 1.0,
    k_max: int = DEFAULT_K_MAX,
) -> tuple[PolicyParams, list[float]]:
    """Full-batch gradient descent on the per-decision SFT loss.

    Returns the final params and the per-decision loss before each step plus the final one.
    """
    norm = sft_weight_total(trajectories, mask_weight)
    if norm == 0:
        norm = 1.0
    losses = []
    for _ in range(steps):
        loss, grad = sft_loss(params, problems, trajectories, mask_weight, k_max)
        losses.append(loss / norm)
        params = gd_step(params, grad / norm, lr)
    losses.append(sft_loss(params, problems, trajectories, mask_weight, k_max)[0] / norm)
    return params, losses


def exact_distribution(params: PolicyParams, p: Problem, k_max: int = DEFAULT_K_MAX) -> dict[tuple, float]:
    """Probability of every trajectory signature, by enumeration."""
    return {y.signature(): math.exp(logprob(params, p, y, k_max)) for y in enumerate_trajectories(p, k_max)}
