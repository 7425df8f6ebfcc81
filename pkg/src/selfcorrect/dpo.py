"""Stage 3: DPO loss, preference buffer and the semi-online training loop."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .env import Problem
from .policy import PolicyParams, gd_step, logprob, logprob_and_grad, sample
from .trajectory import DEFAULT_K_MAX, AutomatonMode, Trajectory, parse, render

log = logging.getLogger(__name__)

LN2 = math.log(2.0)

Teacher = Callable[[Problem, Trajectory], "object"]


@dataclass(frozen=True)
class PreferencePair:
    problem_id: str
    y_win: Trajectory
    y_lose: Trajectory
    teacher_margin: float
    source: str = "seed"
    created_iter: int = 0

    def __post_init__(self) -> None:
        if self.y_win == self.y_lose:
            raise ValueError("winner and loser must differ")
        if self.teacher_margin < 0:
            raise ValueError("teacher margin must be >= 0")
        if self.source not in ("seed", "online"):
            raise ValueError(f"unknown pair source {self.source!r}")

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "y_win": render(self.y_win),
            "y_lose": render(self.y_lose),
            "teacher_margin": self.teacher_margin,
            "source": self.source,
            "created_iter": self.created_iter,
        }

    @classmethod
    def from_dict(cls, d: dict, k_max: int = DEFAULT_K_MAX) -> PreferencePair:
        pid = d["problem_id"]
        return cls(
            pid,
            parse(d["y_win"], pid, AutomatonMode.CANONICAL, k_max),
            parse(d["y_lose"], pid, AutomatonMode.CANONICAL, k_max),
            float(d["teacher_margin"]),
            d.get("source", "seed"),
            int(d.get("created_iter", 0)),
        )


def write_pairs(path: str | Path, pairs: Iterable[PreferencePair]) -> None:
    with open(path, "w") as f:
        for pair in pairs:
            f.write(json.dumps(pair.to_dict()) + "\n")


def read_pairs(path: str | Path, k_max: int = DEFAULT_K_MAX) -> list[PreferencePair]:
    with open(path) as f:
        return [PreferencePair.from_dict(json.loads(line), k_max) for line in f if line.strip()]


# --------------------------------------------------------------------------- loss


def dpo_margin(
    params: PolicyParams,
    ref_params: PolicyParams,
    pair: PreferencePair,
    beta: float,
    problem: Problem,
    k_max: int = DEFAULT_K_MAX,
) -> float:
    """z = beta * [(log pi(win) - log ref(win)) - (log pi(lose) - log ref(lose))]."""
    w = logprob(params, problem, pair.y_win, k_max) - logprob(ref_params, problem, pair.y_win, k_max)
    lo = logprob(params, problem, pair.y_lose, k_max) - logprob(ref_params, problem, pair.y_lose, k_max)
    return beta * (w - lo)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def dpo_loss(
    params: PolicyParams,
    ref_params: PolicyParams,
    pair: PreferencePair,
    beta: float,
    problem: Problem,
    k_max: int = DEFAULT_K_MAX,
    *,
    ref_logprobs: tuple[float, float] | None = None,
) -> tuple[float, np.ndarray]:
    """-log sigmoid(z) and its gradient with respect to ``params`` (the reference stays fixed)."""
    lw, gw = logprob_and_grad(params, problem, pair.y_win, k_max)
    ll, gl = logprob_and_grad(params, problem, pair.y_lose, k_max)
    if ref_logprobs is None:
        ref_logprobs = (logprob(ref_params, problem, pair.y_win, k_max), logprob(ref_params, problem, pair.y_lose, k_max))
    rw, rl = ref_logprobs
    if not all(map(math.isfinite, (lw, ll, rw, rl))):
        raise FloatingPointError(f"non-finite log-probability for pair on {pair.problem_id}")
    z = beta * ((lw - rw) - (ll - rl))
    loss = float(np.logaddexp(0.0, -z))
    grad = -(1.0 - _sigmoid(z)) * beta * (gw - gl)
    return loss, grad


def preference_accuracy(
    params: PolicyParams, pairs: Sequence[PreferencePair], problems: Mapping[str, Problem], k_max: int = DEFAULT_K_MAX
) -> float | None:
    """Fraction of pairs whose winner is strictly more likely than the loser under ``params``."""
    if not pairs:
        return None
    hits = 0
    for pair in pairs:
        p = problems[pair.problem_id]
        hits += logprob(params, p, pair.y_win, k_max) > logprob(params, p, pair.y_lose, k_max)
    return hits / len(pairs)


# --------------------------------------------------------------------------- online pairs


def generate_candidates(
    params: PolicyParams, p: Problem, N: int, rng: np.random.Generator, k_max: int = DEFAULT_K_MAX
) -> list[Trajectory]:
    if N < 2:
        raise ValueError("need at least two candidates")
    return [sample(params, p, rng, k_max) for _ in range(N)]


class RejectReason(str, Enum):
    AMBIGUOUS = "ambiguous"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class Rejected:
    reason: RejectReason
    margin: float


def label_pair(
    p: Problem,
    candidates: Sequence[Trajectory],
    teacher: Teacher,
    tau: float,
    *,
    created_iter: int = 0,
    source: str = "online",
) -> PreferencePair | Rejected:
    """Best-vs-worst by teacher total (ties go to the lower index); ambiguous pairs are dropped."""
    scores = [teacher(p, y) for y in candidates]
    totals = [s.total for s in scores]
    win = max(range(len(totals)), key=lambda i: (totals[i], -i))
    lose = min(range(len(totals)), key=lambda i: (totals[i], i))
    margin = totals[win] - totals[lose]
    correct = {s.correctness for s in scores}
    if margin < tau or candidates[win] == candidates[lose]:
        reason = RejectReason.DEGENERATE if len(correct) == 1 else RejectReason.AMBIGUOUS
        return Rejected(reason, margin)
    return PreferencePair(p.id, candidates[win], candidates[lose], margin, source, created_iter)


# --------------------------------------------------------------------------- buffer


class Eviction(str, Enum):
    FIFO = "fifo"
    ADAPTIVE = "adaptive"


class PreferenceBuffer:
    """Bounded pair store. FIFO drops the oldest pair; ADAPTIVE drops the smallest
    teacher margin (oldest first among ties)."""

    def __init__(self, capacity: int, eviction: Eviction | str = Eviction.FIFO):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.eviction = Eviction(eviction)
        self.pairs: list[PreferencePair] = []

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def update(self, new_pairs: Iterable[PreferencePair]) -> list[PreferencePair]:
        """Append, then evict down to capacity. Returns the evicted pairs."""
        self.pairs.extend(new_pairs)
        evicted = []
        while len(self.pairs) > self.capacity:
            if self.eviction is Eviction.FIFO:
                i = 0
            else:
                i = min(range(len(self.pairs)), key=lambda j: (self.pairs[j].teacher_margin, j))
            evicted.append(self.pairs.pop(i))
        return evicted

    def sample(self, rng: np.random.Generator, n: int) -> list[PreferencePair]:
        if not self.pairs:
            raise ValueError("cannot sample from an empty preference buffer")
        idx = rng.choice(len(self.pairs), size=min(n, len(self.pairs)), replace=False)
        return [self.pairs[i] for i in idx]

    def composition(self) -> dict[str, int]:
        out = {"seed": 0, "online": 0}
        for pair in self.pairs:
            out[pair.source] += 1
        return out


def buffer_update(buf: PreferenceBuffer, new_pairs: Iterable[PreferencePair]) -> PreferenceBuffer:
    buf.update(new_pairs)
    return buf


# --------------------------------------------------------------------------- loop


class DpoMode(str, Enum):
    SEMI_ONLINE = "semi_online"
    OFFLINE = "offline"


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.5
    lr: float = 0.1
    batch_size: int = 8
    steps: int = 200                 # S, optimisation steps per iteration
    iterations: int = 5              # T
    regen_every: int | None = None   # M; None means once per iteration
    n_candidates: int = 4            # N
    tau: float = 0.2
    mode: DpoMode = DpoMode.SEMI_ONLINE
    seed: int = 0
    buffer_capacity: int = 256
    eviction: Eviction = Eviction.FIFO
    prompts_per_iter: int = 16
    heldout_fraction: float = 0.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", DpoMode(self.mode))
        object.__setattr__(self, "eviction", Eviction(self.eviction))
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for name in ("batch_size", "iterations", "n_candidates", "buffer_capacity", "prompts_per_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_candidates < 2:
            raise ValueError("n_candidates must be >= 2")
        if self.regen_every is not None and self.regen_every < 1:
            raise ValueError("regen_every must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ValueError("heldout_fraction must lie in [0, 1)")


def split_pairs(
    pairs: Sequence[PreferencePair], fraction: float, seed: int
) -> tuple[list[PreferencePair], list[PreferencePair]]:
    """Split by problem into (train, held-out); deterministic in ``seed``."""
    ids = sorted({p.problem_id for p in pairs})
    rng = np.random.default_rng(seed)
    n_held = int(round(fraction * len(ids)))
    held = set(rng.permutation(ids)[:n_held].tolist()) if n_held else set()
    train = [p for p in pairs if p.problem_id not in held]
    heldout = [p for p in pairs if p.problem_id in held]
    return train, heldout


def _margin_stats(pairs: Sequence[PreferencePair]) -> dict:
    if not pairs:
        return {"n": 0, "mean": None, "min": None, "max": None}
    m = np.array([p.teacher_margin for p in pairs])
    return {"n": len(m), "mean": float(m.mean()), "min": float(m.min()), "max": float(m.max())}


def run_pipeline(
    cfg: DpoConfig,
    seed_pairs: Sequence[PreferencePair],
    prompts: Sequence[Problem],
    teacher: Teacher,
    sft_params: PolicyParams,
    problems: Mapping[str, Problem],
    *,
    heldout: Sequence[PreferencePair] = (),
    k_max: int = DEFAULT_K_MAX,
    jobs: int = 1,
    buffer: PreferenceBuffer | None = None,
) -> tuple[PolicyParams, list[dict]]:
    """Iterative DPO from ``sft_params`` with the reference fixed at ``sft_params``.

    Each iteration: (semi-online only) sample a slice of prompts, draw N candidates
    per prompt from the current policy, label best-vs-worst with the teacher and add
    surviving pairs to the buffer; then S gradient steps on uniform mini-batches.
    """
    ref = sft_params
    params = sft_params
    buf = buffer if buffer is not None else PreferenceBuffer(cfg.buffer_capacity, cfg.eviction)
    buf.update(seed_pairs)
    if not len(buf):
        raise ValueError("preference buffer is empty after seeding")

    gen_seq, batch_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    gen_rng = np.random.default_rng(gen_seq)
    batch_rng = np.random.default_rng(batch_seq)
    order = gen_rng.permutation(len(prompts)) if prompts else np.array([], dtype=int)
    cursor = 0
    winners = {p.problem_id: p.y_win for p in seed_pairs}
    ref_cache: dict[tuple[str, Trajectory], float] = {}

    def ref_lp(pid: str, y: Trajectory) -> float:
        key = (pid, y)
        if key not in ref_cache:
            ref_cache[key] = logprob(ref, problems[pid], y, k_max)
        return ref_cache[key]

    def generate(t: int) -> dict:
        nonlocal cursor
        n = min(cfg.prompts_per_iter, len(prompts))
        chosen = [prompts[order[(cursor + i) % len(prompts)]] for i in range(n)]
        cursor = (cursor + n) % max(len(prompts), 1)
        seeds = gen_rng.integers(0, 2**63, size=n)
        snapshot = params

        def one(i: int):
            p = chosen[i]
            rng = np.random.default_rng(int(seeds[i]))
            cands = generate_candidates(snapshot, p, cfg.n_candidates, rng, k_max)
            if p.id in winners:
                cands.append(winners[p.id])
            return label_pair(p, cands, teacher, cfg.tau, created_iter=t)

        if jobs > 1:
            with ThreadPoolExecutor(jobs) as pool:
                results = list(pool.map(one, range(n)))
        else:
            results = [one(i) for i in range(n)]
        new = [r for r in results if isinstance(r, PreferencePair)]
        rejected = [r for r in results if isinstance(r, Rejected)]
        evicted = buf.update(new)
        return {
            "new_pairs": len(new),
            "rejected_ambiguous": sum(r.reason is RejectReason.AMBIGUOUS for r in rejected),
            "rejected_degenerate": sum(r.reason is RejectReason.DEGENERATE for r in rejected),
            "evicted": len(evicted),
            "new_margins": _margin_stats(new),
        }

    history = [
        {
            "iter": 0,
            "mean_loss": None,
            "buffer_size": len(buf),
            "heldout_pref_acc": preference_accuracy(params, heldout, problems, k_max),
            **{f"n_{k}": v for k, v in buf.composition().items()},
        }
    ]
    regen = cfg.regen_every or max(cfg.steps, 1)
    for t in range(1, cfg.iterations + 1):
        gen_log: list[dict] = []
        losses = []
        for s in range(max(cfg.steps, 1)):
            if cfg.mode is DpoMode.SEMI_ONLINE and prompts and s % regen == 0:
                gen_log.append(generate(t))
            if cfg.steps == 0:
                break
            batch = buf.sample(batch_rng, cfg.batch_size)
            total_loss = 0.0
            total_grad = np.zeros_like(params.weights)
            for pair in batch:
                p = problems[pair.problem_id]
                refs = (ref_lp(pair.problem_id, pair.y_win), ref_lp(pair.problem_id, pair.y_lose))
                loss, grad = dpo_loss(params, ref, pair, cfg.beta, p, k_max, ref_logprobs=refs)
                total_loss += loss
                total_grad += grad
            mean_loss = total_loss / len(batch)
            if not math.isfinite(mean_loss):
                raise FloatingPointError(f"non-finite DPO loss at iteration {t}, step {s}")
            losses.append(mean_loss)
            params = gd_step(params, total_grad / len(batch), cfg.lr)
        record = {
            "iter": t,
            "mean_loss": float(np.mean(losses)) if losses else None,
            "buffer_size": len(buf),
            "heldout_pref_acc": preference_accuracy(params, heldout, problems, k_max),
            **{f"n_{k}": v for k, v in buf.composition().items()},
            "buffer_margins": _margin_stats(buf.pairs),
        }
        if gen_log:
            record["generation"] = gen_log
        history.append(record)
        log.info("iter %d loss=%s acc=%s buffer=%d", t, record["mean_loss"], record["heldout_pref_acc"], len(buf))
    return params, history

