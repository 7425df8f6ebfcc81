"""Run configuration: one JSON document, validated before any work starts."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import dpo as dpo_mod
from .env import DEFAULT_CONFUSION, DEFAULT_SOLVER_ACCURACY, Confusion, EnvConfig
from .oracles import RemoteEndpointConfig
from .trajectory import DEFAULT_K_MAX, AutomatonMode


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ConfusionModel(_Strict):
    p_correct_given_right: float = Field(ge=0.0, le=1.0)
    p_correct_given_wrong: float = Field(ge=0.0, le=1.0)


class EnvSection(_Strict):
    A: int = Field(5, ge=1)
    counts_per_level: list[int] = Field(default_factory=lambda: [10] * 5, min_length=5, max_length=5)
    solver_accuracy: list[float] = Field(default_factory=lambda: list(DEFAULT_SOLVER_ACCURACY), min_length=5, max_length=5)
    verifier_confusion: dict[Literal["direct", "contradiction"], ConfusionModel] = Field(
        default_factory=lambda: {k: ConfusionModel(**v.__dict__) for k, v in DEFAULT_CONFUSION.items()}
    )
    seed: int | None = None

    @model_validator(mode="after")
    def _check(self) -> EnvSection:
        if any(c < 0 for c in self.counts_per_level):
            raise ValueError("counts_per_level must be >= 0")
        if any(not 0.0 <= p <= 1.0 for p in self.solver_accuracy):
            raise ValueError("solver_accuracy entries must lie in [0, 1]")
        if set(self.verifier_confusion) != {"direct", "contradiction"}:
            raise ValueError("verifier_confusion needs both 'direct' and 'contradiction' rows")
        return self


class DataSection(_Strict):
    accuracy_samples: int = Field(16, ge=1)
    max_retries: int = Field(64, ge=0)
    rejected_attempts: int = Field(8, ge=1)


class SftSection(_Strict):
    lr: float = Field(0.1, gt=0)
    steps: int = Field(50, ge=0)
    mask_weight: float = Field(1.0, ge=0)


class DpoSection(_Strict):
    beta: float = Field(0.5, gt=0)
    lr: float = Field(0.1, gt=0)
    batch_size: int = Field(8, ge=1)
    steps: int = Field(200, ge=0)
    iterations: int = Field(5, ge=1)
    regen_every: int | None = Field(None, ge=1)
    n_candidates: int = Field(4, ge=2)
    tau: float = Field(0.2, ge=0.0, le=1.0)
    mode: Literal["semi_online", "offline"] = "semi_online"
    buffer_capacity: int = Field(256, ge=1)
    eviction: Literal["fifo", "adaptive"] = "fifo"
    prompts_per_iter: int = Field(16, ge=1)
    heldout_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    seed: int | None = None


class RemoteSection(_Strict):
    base_url: str = "http://localhost:8000/v1"
    model: str = "gpt-4o"
    api_key_env: str = "SVSR_API_KEY"
    temperature: float = Field(0.7, ge=0.0)
    timeout: float = Field(60.0, gt=0)
    max_retries: int = Field(3, ge=0)
    backoff: float = Field(1.0, ge=0)


class OracleSection(_Strict):
    kind: Literal["simulated", "remote"] = "simulated"
    remote: RemoteSection = Field(default_factory=RemoteSection)


class EvalSection(_Strict):
    samples_per_problem: int = Field(20, ge=1)


class RunConfig(_Strict):
    env: EnvSection = Field(default_factory=EnvSection)
    data: DataSection = Field(default_factory=DataSection)
    sft: SftSection = Field(default_factory=SftSection)
    dpo: DpoSection = Field(default_factory=DpoSection)
    oracle: OracleSection = Field(default_factory=OracleSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    automaton_mode: Literal["canonical", "literal"] = "canonical"
    k_max: int = Field(DEFAULT_K_MAX, ge=0)
    output_dir: str = "runs/default"
    seed: int = 0

    # sub-seeds derived from the master seed; explicit section seeds win
    def _derived(self) -> list[int]:
        return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(self.seed).spawn(4)]

    @property
    def env_seed(self) -> int:
        return self.env.seed if self.env.seed is not None else self._derived()[0]

    @property
    def data_seed(self) -> int:
        return self._derived()[1]

    @property
    def dpo_seed(self) -> int:
        return self.dpo.seed if self.dpo.seed is not None else self._derived()[2]

    @property
    def eval_seed(self) -> int:
        return self._derived()[3]

    @property
    def mode(self) -> AutomatonMode:
        return AutomatonMode(self.automaton_mode)

    def env_config(self) -> EnvConfig:
        return EnvConfig(
            A=self.env.A,
            counts_per_level=tuple(self.env.counts_per_level),
            solver_accuracy=tuple(self.env.solver_accuracy),
            verifier_confusion={k: Confusion(**v.model_dump()) for k, v in self.env.verifier_confusion.items()},
            seed=self.env_seed,
        )

    def dpo_config(self, mode: str | None = None) -> dpo_mod.DpoConfig:
        fields = self.dpo.model_dump(exclude={"seed"})
        if mode is not None:
            fields["mode"] = mode
        return dpo_mod.DpoConfig(**fields, seed=self.dpo_seed)

    def remote_config(self) -> RemoteEndpointConfig:
        return RemoteEndpointConfig(**self.oracle.remote.model_dump())


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    """Read and validate a config file (defaults when ``path`` is None); overrides
    replace top-level keys and are validated too."""
    data = json.loads(Path(path).read_text()) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.model_validate(data)
