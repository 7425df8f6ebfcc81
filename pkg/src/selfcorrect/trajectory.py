"""Self-correction trajectories: step types, transition automaton, mask, text grammar.

A trajectory is an ordered list of SOLVE / VERIFY / RECTIFY steps. The serialized
form wraps each step in a tag and joins consecutive steps with the connective
phrases used when building the data::

    <solve>...Answer: 7</solve>
    Wait, let me recheck my solution.
    <verify strategy="direct">...Verdict: INCORRECT</verify>
    Let me try again.
    <rectify>...Answer: 5</rectify>
    Wait, let me recheck my solution.
    <verify strategy="contradiction">...Verdict: CORRECT</verify>
"""

from __future__ import annotations

import re
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum

DEFAULT_K_MAX = 4

RECHECK_PHRASE = "Wait, let me recheck my solution."
RETRY_PHRASE = "Let me try again."


class StepKind(str, Enum):
    SOLVE = "solve"
    VERIFY = "verify"
    RECTIFY = "rectify"


# Terminal marker returned by next_allowed; never stored in a trajectory.
END = "end"


class Verdict(str, Enum):
    CORRECT = "CORRECT"
    INCORRECT = "INCORRECT"


class VerifyStrategy(str, Enum):
    DIRECT_DERIVATION = "direct"
    CONTRADICTION = "contradiction"


class AutomatonMode(str, Enum):
    CANONICAL = "canonical"
    LITERAL = "literal"


class TrajectoryError(ValueError):
    """Base class for malformed trajectories."""


class EmptyTrajectory(TrajectoryError):
    pass


class TransitionError(TrajectoryError):
    """An adjacent pair of steps (or the ending) is not allowed by the automaton.

    ``found`` is a StepKind, or ``END`` when the trajectory stops too early.
    """

    def __init__(self, index: int, expected: frozenset, found):
        self.index = index
        self.expected = expected
        self.found = found
        names = sorted(_label(e) for e in expected)
        super().__init__(f"illegal step at index {index}: expected one of {names}, found {_label(found)}")


class ParseError(TrajectoryError):
    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"parse error at offset {position}: {reason}")


def _label(x) -> str:
    return x.value if isinstance(x, Enum) else str(x)


_CLOSING_TAGS = tuple(f"</{k.value}>" for k in StepKind)
_ANSWER_RE = re.compile(r"[^\s<>]+")


@dataclass(frozen=True)
class Step:
    kind: StepKind
    text: str = ""
    answer: str | None = None
    verdict: Verdict | None = None
    strategy: VerifyStrategy | None = None

    def __post_init__(self) -> None:
        if self.kind is StepKind.VERIFY:
            if self.verdict is None:
                raise TrajectoryError("VERIFY step requires a verdict")
            if self.answer is not None:
                raise TrajectoryError("VERIFY step carries no answer")
        else:
            if self.answer is None:
                raise TrajectoryError(f"{self.kind.value.upper()} step requires an answer")
            if self.verdict is not None or self.strategy is not None:
                raise TrajectoryError("verdict/strategy are only valid on VERIFY steps")
            if not _ANSWER_RE.fullmatch(self.answer):
                raise TrajectoryError(f"answer token must be non-empty without whitespace or tags: {self.answer!r}")
        if any(tag in self.text for tag in _CLOSING_TAGS):
            raise TrajectoryError("step text may not contain a closing step tag")


def solve(answer: str, text: str = "") -> Step:
    return Step(StepKind.SOLVE, text, answer=answer)


def rectify(answer: str, text: str = "") -> Step:
    return Step(StepKind.RECTIFY, text, answer=answer)


def verify(verdict: Verdict, strategy: VerifyStrategy | None = None, text: str = "") -> Step:
    return Step(StepKind.VERIFY, text, verdict=verdict, strategy=strategy)


@dataclass(frozen=True)
class Trajectory:
    problem_id: str
    steps: tuple[Step, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def final_answer(self) -> str | None:
        for step in reversed(self.steps):
            if step.answer is not None:
                return step.answer
        return None

    @property
    def k(self) -> int:
        return sum(1 for s in self.steps if s.kind is StepKind.RECTIFY)

    def kinds(self) -> tuple[StepKind, ...]:
        return tuple(s.kind for s in self.steps)

    def signature(self) -> tuple:
        """Decision content of the trajectory: kinds, answers and verdicts (no text, no strategy)."""
        return tuple((s.kind.value, s.answer, s.verdict.value if s.verdict else None) for s in self.steps)

    def __len__(self) -> int:
        return len(self.steps)


def next_allowed(
    kind: StepKind,
    verdict: Verdict | None,
    mode: AutomatonMode = AutomatonMode.CANONICAL,
    at_cap: bool = False,
    *,
    after_rectify: bool = False,
) -> frozenset:
    """Successor set of a step, as a frozenset of StepKind and/or END.

    ``at_cap`` means the rectification budget is spent: an INCORRECT verification
    then ends the trajectory instead of asking for another rectification.
    ``after_rectify`` only matters in LITERAL mode, where a CORRECT verification
    of a rectified answer ends the trajectory and any other CORRECT verification
    returns to SOLVE.
    """
    if (kind is StepKind.VERIFY) != (verdict is not None):
        raise ValueError("verdict must be supplied exactly when kind is VERIFY")
    if kind in (StepKind.SOLVE, StepKind.RECTIFY):
        return frozenset({StepKind.VERIFY})
    if verdict is Verdict.INCORRECT:
        return frozenset({END}) if at_cap else frozenset({StepKind.RECTIFY})
    if mode is AutomatonMode.CANONICAL:
        return frozenset({END})
    return frozenset({END}) if after_rectify else frozenset({StepKind.SOLVE})


def validate(
    traj: Trajectory | Sequence[Step],
    mode: AutomatonMode = AutomatonMode.CANONICAL,
    k_max: int = DEFAULT_K_MAX,
    *,
    complete: bool = True,
) -> None:
    """Raise TransitionError at the first illegal transition; return None if legal.

    With ``complete=False`` a legal prefix is accepted.
    """
    steps = traj.steps if isinstance(traj, Trajectory) else tuple(traj)
    if not steps:
        raise EmptyTrajectory("trajectory has no steps")
    allowed = frozenset({StepKind.SOLVE})
    rectified = 0
    prev: Step | None = None
    for i, step in enumerate(steps):
        if step.kind not in allowed:
            raise TransitionError(i, allowed, step.kind)
        if step.kind is StepKind.RECTIFY:
            rectified += 1
        allowed = next_allowed(
            step.kind,
            step.verdict,
            mode,
            at_cap=rectified >= k_max,
            after_rectify=prev is not None and prev.kind is StepKind.RECTIFY,
        )
        prev = step
    if complete and END not in allowed:
        raise TransitionError(len(steps), allowed, END)


def is_valid(traj: Trajectory, mode: AutomatonMode = AutomatonMode.CANONICAL, k_max: int = DEFAULT_K_MAX) -> bool:
    try:
        validate(traj, mode, k_max)
    except TrajectoryError:
        return False
    return True


def mask(traj: Trajectory | Sequence[Step]) -> list[int]:
    steps = traj.steps if isinstance(traj, Trajectory) else traj
    return [1 if s.kind in (StepKind.VERIFY, StepKind.RECTIFY) else 0 for s in steps]


def token_mask(traj: Trajectory, tokenize: Callable[[str], list[str]] = str.split) -> list[int]:
    """Per-token mask over the rendered text; every token of a step (including the
    connective phrase that introduces it) carries that step's bit."""
    bits: list[int] = []
    for i, (step, bit) in enumerate(zip(traj.steps, mask(traj))):
        chunk = _render_step(step)
        phrase = _connective(step.kind) if i else None
        if phrase:
            chunk = phrase + "\n" + chunk
        bits.extend([bit] * len(tokenize(chunk)))
    return bits


# --------------------------------------------------------------------------- text


def _connective(kind: StepKind) -> str | None:
    if kind is StepKind.VERIFY:
        return RECHECK_PHRASE
    if kind is StepKind.RECTIFY:
        return RETRY_PHRASE
    return None


def _render_step(step: Step) -> str:
    tag = step.kind.value
    if step.kind is StepKind.VERIFY:
        attr = f' strategy="{step.strategy.value}"' if step.strategy else ""
        return f"<{tag}{attr}>{step.text}Verdict: {step.verdict.value}</{tag}>"
    return f"<{tag}>{step.text}Answer: {step.answer}</{tag}>"


def render(traj: Trajectory) -> str:
    parts: list[str] = []
    for i, step in enumerate(traj.steps):
        if i:
            phrase = _connective(step.kind)
            parts.append("\n" + phrase + "\n" if phrase else "\n")
        parts.append(_render_step(step))
    return "".join(parts)


_OPEN_RE = re.compile(r'<(solve|verify|rectify)(?: strategy="([^"]*)")?>')
_VERDICT_RE = re.compile(r"Verdict: (CORRECT|INCORRECT)$")
_ANSWER_FIELD_RE = re.compile(r"Answer: ([^\s<>]+)$")


def _parse_step_at(text: str, pos: int) -> tuple[Step, int]:
    m = _OPEN_RE.match(text, pos)
    if not m:
        raise ParseError(pos, "expected an opening <solve>, <verify> or <rectify> tag")
    kind = StepKind(m.group(1))
    close = f"</{kind.value}>"
    end = text.find(close, m.end())
    if end < 0:
        raise ParseError(m.end(), f"missing {close}")
    body = text[m.end():end]
    if kind is StepKind.VERIFY:
        strategy = None
        if m.group(2) is not None:
            try:
                strategy = VerifyStrategy(m.group(2))
            except ValueError:
                raise ParseError(pos, f"unknown verify strategy {m.group(2)!r}") from None
        vm = _VERDICT_RE.search(body)
        if not vm:
            raise ParseError(end, "verify step lacks a terminal 'Verdict:' field")
        step = Step(kind, body[: vm.start()], verdict=Verdict(vm.group(1)), strategy=strategy)
    else:
        if m.group(2) is not None:
            raise ParseError(pos, f"strategy attribute not allowed on <{kind.value}>")
        am = _ANSWER_FIELD_RE.search(body)
        if not am:
            raise ParseError(end, f"{kind.value} step lacks a terminal 'Answer:' field")
        step = Step(kind, body[: am.start()], answer=am.group(1))
    return step, end + len(close)


def parse_step(text: str) -> Step:
    """Parse a single tagged step, tolerating surrounding whitespace and a leading connective phrase."""
    body = text.strip()
    for phrase in (RECHECK_PHRASE, RETRY_PHRASE):
        if body.startswith(phrase):
            body = body[len(phrase):].lstrip()
    start = len(text) - len(text.lstrip())
    try:
        step, end = _parse_step_at(body, 0)
    except ParseError as e:
        raise ParseError(start + e.position, e.reason) from None
    if body[end:].strip():
        raise ParseError(start + end, "trailing content after step")
    return step


def parse(
    text: str,
    problem_id: str = "",
    mode: AutomatonMode = AutomatonMode.CANONICAL,
    k_max: int = DEFAULT_K_MAX,
    *,
    complete: bool = True,
) -> Trajectory:
    """Inverse of render; also checks transitions. Raises ParseError or TransitionError."""
    steps: list[Step] = []
    pos = sep_pos = 0
    sep = ""
    while True:
        step, pos = _parse_step_at(text, pos)
        if steps:
            phrase = _connective(step.kind)
            # separator was consumed before the tag; verify it matched the step kind
            expected = "\n" + phrase + "\n" if phrase else "\n"
            if sep != expected:
                raise ParseError(sep_pos, f"expected separator {expected!r} before <{step.kind.value}>")
        steps.append(step)
        if pos == len(text):
            break
        sep_pos = pos
        nxt = _OPEN_RE.search(text, pos)
        if not nxt:
            raise ParseError(pos, "unknown trailing content")
        sep = text[pos:nxt.start()]
        pos = nxt.start()
    traj = Trajectory(problem_id, tuple(steps))
    validate(traj, mode, k_max, complete=complete)
    return traj
