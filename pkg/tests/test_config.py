import json

import pytest
from pydantic import ValidationError

from selfcorrect.config import RunConfig, load_config
from selfcorrect.dpo import DpoMode
from selfcorrect.trajectory import AutomatonMode


def test_defaults():
    cfg = RunConfig()
    assert cfg.k_max == 4 and cfg.mode is AutomatonMode.CANONICAL
    env = cfg.env_config()
    assert env.A == 5 and sum(env.counts_per_level) == 50
    d = cfg.dpo_config()
    assert (d.beta, d.lr, d.steps, d.iterations, d.n_candidates, d.tau, d.buffer_capacity) == (0.5, 0.1, 200, 5, 4, 0.2, 256)


def test_unknown_keys_rejected():
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"sedd": 1})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"dpo": {"betta": 0.1}})


@pytest.mark.parametrize("bad", [
    {"env": {"counts_per_level": [1, 1, 1, 1]}},
    {"env": {"solver_accuracy": [0.9, 0.8, 0.7, 0.6, 1.5]}},
    {"env": {"verifier_confusion": {"direct": {"p_correct_given_right": 0.9, "p_correct_given_wrong": 0.1}}}},
    {"dpo": {"tau": 2}},
    {"dpo": {"mode": "online"}},
    {"automaton_mode": "strict"},
    {"k_max": -1},
])
def test_schema_violations(bad):
    with pytest.raises(ValidationError):
        RunConfig.model_validate(bad)


def test_seeds_derive_from_master_seed():
    a, b = RunConfig(seed=1), RunConfig(seed=2)
    assert a.env_seed != b.env_seed and a.dpo_seed != b.dpo_seed
    assert len({a.env_seed, a.data_seed, a.dpo_seed, a.eval_seed}) == 4
    assert RunConfig(seed=1).data_seed == a.data_seed
    assert RunConfig.model_validate({"env": {"seed": 7}}).env_seed == 7


def test_load_with_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "dpo": {"mode": "offline"}}))
    cfg = load_config(path, output_dir="elsewhere", seed=None)
    assert cfg.seed == 3 and cfg.output_dir == "elsewhere"
    assert cfg.dpo_config().mode is DpoMode.OFFLINE
    assert cfg.dpo_config("semi_online").mode is DpoMode.SEMI_ONLINE
    assert load_config(None).seed == 0
