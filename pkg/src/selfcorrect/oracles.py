"""Generator and teacher oracles.

Simulated oracles are exact samplers with configurable accuracies; the remote
generator talks to any chat-completions compatible HTTP endpoint.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from importlib import resources
from string import Template
from typing import Protocol

import httpx
import numpy as np

from .env import DEFAULT_CONFUSION, Confusion, EnvConfig, Problem, grade
from .trajectory import (
    DEFAULT_K_MAX,
    AutomatonMode,
    ParseError,
    Step,
    StepKind,
    Trajectory,
    TrajectoryError,
    Verdict,
    VerifyStrategy,
    is_valid,
    parse_step,
    render,
)

log = logging.getLogger(__name__)

API_KEY_ENV = "SVSR_API_KEY"
API_BASE_ENV = "SVSR_API_BASE"


class GeneratorOracle(Protocol):
    """Produces single steps on request. ``hint`` carries construction-time guidance
    (e.g. the reference answer); simulated oracles ignore it."""

    def solve(self, p: Problem, history: Sequence[Step], rng: np.random.Generator, hint: str | None = None) -> Step: ...

    def verify(
        self, p: Problem, answer: str, strategy: VerifyStrategy, rng: np.random.Generator,
        history: Sequence[Step] = (), hint: str | None = None,
    ) -> Step: ...

    def rectify(self, p: Problem, history: Sequence[Step], rng: np.random.Generator, hint: str | None = None) -> Step: ...


# --------------------------------------------------------------------------- simulated


def sample_answer(p: Problem, accuracy: float, rng: np.random.Generator) -> str:
    """Ground truth with probability ``accuracy``, otherwise a uniformly drawn wrong answer."""
    if len(p.answer_space) == 1 or rng.random() < accuracy:
        return p.gt_answer
    wrong = [a for a in p.answer_space if a != p.gt_answer]
    return wrong[int(rng.integers(len(wrong)))]


def sample_verdict(p: Problem, answer: str, confusion: Confusion, rng: np.random.Generator) -> Verdict:
    p_correct = confusion.p_correct_given_right if grade(p, answer) else confusion.p_correct_given_wrong
    return Verdict.CORRECT if rng.random() < p_correct else Verdict.INCORRECT


_SOLVE_TEXT = "Working through the problem step by step.\n"
_RECTIFY_TEXT = "Redoing the computation from the start.\n"
_VERIFY_TEXT = {
    VerifyStrategy.DIRECT_DERIVATION: "Re-deriving the result forward from the givens.\n",
    VerifyStrategy.CONTRADICTION: "Assuming the answer is wrong and looking for a contradiction.\n",
    None: "Checking the previous answer.\n",
}


def simulated_solve(p: Problem, rng: np.random.Generator, accuracy: float) -> Step:
    return Step(StepKind.SOLVE, _SOLVE_TEXT, answer=sample_answer(p, accuracy, rng))


def simulated_rectify(p: Problem, rng: np.random.Generator, accuracy: float) -> Step:
    return Step(StepKind.RECTIFY, _RECTIFY_TEXT, answer=sample_answer(p, accuracy, rng))


def simulated_verify(
    p: Problem,
    answer: str,
    strategy: VerifyStrategy,
    rng: np.random.Generator,
    confusion: dict[str, Confusion] | None = None,
) -> Step:
    table = confusion or DEFAULT_CONFUSION
    verdict = sample_verdict(p, answer, table[strategy.value], rng)
    return Step(StepKind.VERIFY, _VERIFY_TEXT[strategy], verdict=verdict, strategy=strategy)


class SimulatedGenerator:
    """Level-indexed solver accuracy plus per-strategy verifier confusion, from an EnvConfig."""

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()

    def solve(self, p, history, rng, hint=None):
        return simulated_solve(p, rng, self.config.accuracy(p.level))

    def verify(self, p, answer, strategy, rng, history=(), hint=None):
        return simulated_verify(p, answer, strategy, rng, self.config.verifier_confusion)

    def rectify(self, p, history, rng, hint=None):
        return simulated_rectify(p, rng, self.config.accuracy(p.level))


# --------------------------------------------------------------------------- teacher

W_CORRECTNESS, W_FORMAT, W_VERIFICATION = 0.6, 0.2, 0.2


@dataclass(frozen=True)
class TeacherScore:
    correctness: int
    format_valid: int
    verification_quality: float

    @property
    def total(self) -> float:
        return (
            W_CORRECTNESS * self.correctness
            + W_FORMAT * self.format_valid
            + W_VERIFICATION * self.verification_quality
        )


def verification_truths(p: Problem, traj: Trajectory) -> list[tuple[bool, Verdict]]:
    """(was the preceding answer right, verdict given) for every VERIFY step."""
    out = []
    last: str | None = None
    for step in traj.steps:
        if step.answer is not None:
            last = step.answer
        elif step.kind is StepKind.VERIFY and last is not None:
            out.append((last == p.gt_answer, step.verdict))
    return out


def teacher_score(
    p: Problem,
    y: Trajectory,
    mode: AutomatonMode = AutomatonMode.CANONICAL,
    k_max: int = DEFAULT_K_MAX,
) -> TeacherScore:
    final = y.final_answer
    correctness = int(final is not None and final == p.gt_answer)
    checks = verification_truths(p, y)
    if checks:
        matched = sum(1 for right, v in checks if (v is Verdict.CORRECT) == right)
        quality = matched / len(checks)
    else:
        quality = 0.0
    return TeacherScore(correctness, int(is_valid(y, mode, k_max)), quality)


class SimulatedTeacher:
    """Exact teacher with a call counter, so callers can assert when it was consulted."""

    def __init__(self, mode: AutomatonMode = AutomatonMode.CANONICAL, k_max: int = DEFAULT_K_MAX):
        self.mode = mode
        self.k_max = k_max
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, p: Problem, y: Trajectory) -> TeacherScore:
        with self._lock:
            self.calls += 1
        return teacher_score(p, y, self.mode, self.k_max)


# --------------------------------------------------------------------------- remote


@dataclass(frozen=True)
class RemoteEndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "gpt-4o"
    api_key_env: str = API_KEY_ENV
    temperature: float = 0.7
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def resolved_base_url(self) -> str:
        return os.environ.get(API_BASE_ENV, self.base_url).rstrip("/")

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env)


class RemoteError(RuntimeError):
    TRANSPORT = "transport"
    HTTP = "http"
    UNPARSEABLE = "unparseable"

    def __init__(self, kind: str, message: str, retries: int = 0):
        self.kind = kind
        self.retries = retries
        super().__init__(f"{kind}: {message}")


@dataclass
class CallRecord:
    problem_id: str
    action: str
    request: dict
    response: str | None = None
    retries: int = 0
    error: str | None = None
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def load_template(name: str) -> Template:
    return Template(resources.files("selfcorrect.prompts").joinpath(f"{name}.txt").read_text())


def build_messages(
    p: Problem,
    history: Sequence[Step],
    action: StepKind,
    strategy: VerifyStrategy | None = None,
    hint: str | None = None,
) -> list[dict]:
    answer = next((s.answer for s in reversed(history) if s.answer is not None), "")
    fields = {
        "problem_id": p.id,
        "statement": p.statement,
        "attachment": f"Attachment: {p.attachment_ref}" if p.attachment_ref else "",
        "answers": ", ".join(p.answer_space),
        "hint": hint or "",
        "history": render(Trajectory(p.id, tuple(history))) if history else "(none)",
        "answer": answer,
        "strategy": (strategy or VerifyStrategy.DIRECT_DERIVATION).value,
    }
    user = load_template(action.value).substitute(fields)
    return [
        {"role": "system", "content": load_template("system").template},
        {"role": "user", "content": "\n".join(line for line in user.splitlines() if line.strip()) + "\n"},
    ]


def _retryable(exc: Exception) -> bool:
    if isinstance(exc, httpx.TransportError):
        return True
    if isinstance(exc, httpx.HTTPStatusError):
        code = exc.response.status_code
        return code == 429 or code >= 500
    return False


def remote_generate(
    cfg: RemoteEndpointConfig,
    p: Problem,
    history: Sequence[Step],
    action: StepKind,
    strategy: VerifyStrategy | None = None,
    *,
    hint: str | None = None,
    client: httpx.Client | None = None,
    call_log: list[CallRecord] | None = None,
) -> Step:
    """One chat-completions round trip returning a parsed step; raises RemoteError."""
    messages = build_messages(p, history, action, strategy, hint)
    payload = {"model": cfg.model, "messages": messages, "temperature": cfg.temperature}
    headers = {"Content-Type": "application/json"}
    key = cfg.api_key()
    if key:
        headers["Authorization"] = f"Bearer {key}"
    url = f"{cfg.resolved_base_url()}/chat/completions"
    record = CallRecord(p.id, action.value, payload)
    own_client = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    start = time.monotonic()
    try:
        attempt = 0
        while True:
            try:
                resp = client.post(url, json=payload, headers=headers, timeout=cfg.timeout)
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
                break
            except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                if not _retryable(exc) or attempt >= cfg.max_retries:
                    if isinstance(exc, httpx.TransportError):
                        kind = RemoteError.TRANSPORT
                    elif isinstance(exc, httpx.HTTPError):
                        kind = RemoteError.HTTP
                    else:
                        kind = RemoteError.UNPARSEABLE
                    record.error = f"{kind}: {exc}"
                    raise RemoteError(kind, str(exc), attempt) from exc
                attempt += 1
                record.retries = attempt
                log.warning("remote call for %s failed (%s); retry %d/%d", p.id, exc, attempt, cfg.max_retries)
                if cfg.backoff > 0:
                    time.sleep(cfg.backoff * 2 ** (attempt - 1))
        record.response = content
        try:
            step = parse_step(content)
        except (ParseError, TrajectoryError) as exc:
            record.error = f"{RemoteError.UNPARSEABLE}: {exc}"
            raise RemoteError(RemoteError.UNPARSEABLE, str(exc), attempt) from exc
        if step.kind is not action:
            record.error = f"{RemoteError.UNPARSEABLE}: expected <{action.value}>, got <{step.kind.value}>"
            raise RemoteError(RemoteError.UNPARSEABLE, record.error, attempt)
        if step.answer is not None and step.answer not in p.answer_space:
            record.error = f"{RemoteError.UNPARSEABLE}: answer {step.answer!r} not allowed"
            raise RemoteError(RemoteError.UNPARSEABLE, record.error, attempt)
        if action is StepKind.VERIFY and step.strategy is None and strategy is not None:
            step = Step(step.kind, step.text, verdict=step.verdict, strategy=strategy)
        return step
    finally:
        record.elapsed = time.monotonic() - start
        if call_log is not None:
            call_log.append(record)
        if own_client:
            client.close()


@dataclass
class RemoteGenerator:
    """GeneratorOracle backed by remote_generate. Safe to share across threads."""

    cfg: RemoteEndpointConfig
    client: httpx.Client | None = None
    call_log: list[CallRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        if self.client is None:
            self.client = httpx.Client(timeout=self.cfg.timeout)

    def _call(self, p, history, action, strategy=None, hint=None) -> Step:
        local: list[CallRecord] = []
        try:
            return remote_generate(self.cfg, p, history, action, strategy, hint=hint, client=self.client, call_log=local)
        finally:
            with self._lock:
                self.call_log.extend(local)

    def solve(self, p, history, rng, hint=None):
        return self._call(p, history, StepKind.SOLVE, hint=hint)

    def verify(self, p, answer, strategy, rng, history=(), hint=None):
        if not history or history[-1].answer != answer:
            history = (*history, Step(StepKind.SOLVE, answer=answer))
        return self._call(p, history, StepKind.VERIFY, strategy, hint)

    def rectify(self, p, history, rng, hint=None):
        return self._call(p, history, StepKind.RECTIFY, hint=hint)

    def close(self) -> None:
        if self.client is not None:
            self.client.close()
