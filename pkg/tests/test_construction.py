import json

import numpy as np
import pytest

from selfcorrect.construction import (
    CHOSEN,
    CORRUPTED,
    REJECTED,
    WRONG_FINAL,
    ConstructionFailure,
    SftRecord,
    assign_level,
    build_chosen,
    build_corpus,
    build_rejected,
    emit_datasets,
    estimate_accuracy,
    read_sft,
    seed_pairs,
    simulate_trajectory,
    target_cycles,
)
from selfcorrect.dpo import read_pairs
from selfcorrect.env import EnvConfig, gen_problems, grade
from selfcorrect.oracles import SimulatedGenerator, SimulatedTeacher
from selfcorrect.trajectory import (
    StepKind,
    Trajectory,
    TrajectoryError,
    Verdict,
    VerifyStrategy,
    is_valid,
    parse,
    render,
    solve,
    verify,
)

from conftest import make_problem

C, I = Verdict.CORRECT, Verdict.INCORRECT


def fixed_accuracy(acc):
    return SimulatedGenerator(EnvConfig(solver_accuracy=(acc,) * 5))


@pytest.mark.parametrize("acc,expected", [(1.0, 1.0), (0.0, 0.0)])
def test_estimate_accuracy_extremes(rng, acc, expected):
    assert estimate_accuracy(make_problem(), fixed_accuracy(acc), 8, rng) == expected


def test_estimate_accuracy_monte_carlo(rng):
    assert abs(estimate_accuracy(make_problem(), fixed_accuracy(0.5), 10_000, rng) - 0.5) <= 0.02


def test_estimate_accuracy_needs_samples(rng):
    with pytest.raises(ValueError):
        estimate_accuracy(make_problem(), fixed_accuracy(0.5), 0, rng)


@pytest.mark.parametrize("acc,level", [
    (0.95, 1), (1.0, 1), (0.8, 1), (0.79, 2), (0.60, 2), (0.59, 3), (0.4, 3), (0.2, 4), (0.19, 5), (0.0, 5),
])
def test_assign_level(acc, level):
    assert assign_level(acc) == level


def test_target_cycles():
    assert [target_cycles(lv) for lv in range(1, 6)] == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        target_cycles(6)


def test_build_chosen_zero_cycles(rng):
    p = make_problem(gt=3)
    rec = build_chosen(p, SimulatedGenerator(), 0, rng)
    assert rec.trajectory.signature() == (("solve", "3", None), ("verify", None, "CORRECT"))
    assert rec.label == CHOSEN and rec.k == 0


def test_build_chosen_two_cycles(rng):
    p = make_problem(gt=1, level=3)
    rec = build_chosen(p, SimulatedGenerator(), 2, rng)
    y = rec.trajectory
    assert [s.kind.value for s in y.steps] == ["solve", "verify", "rectify", "verify", "rectify", "verify"]
    assert [s.verdict for s in y.steps if s.verdict] == [I, I, C]
    assert y.final_answer == p.gt_answer
    assert all(s.answer != p.gt_answer for s in y.steps[:-2] if s.answer)


def test_build_chosen_property_over_corpus():
    gen = SimulatedGenerator()
    rng = np.random.default_rng(3)
    for i in range(100):
        level = i % 5 + 1
        p = make_problem(gt=i % 5, level=level, pid=f"c{i}")
        rec = build_chosen(p, gen, target_cycles(level), rng)
        assert grade(p, rec.final_answer)
        assert is_valid(rec.trajectory)
        assert rec.k == target_cycles(level)
        assert parse(rec.text, p.id) == rec.trajectory


def test_build_chosen_fails_when_budget_exhausted(rng):
    # a solver that is never wrong cannot supply the forced wrong attempt
    with pytest.raises(ConstructionFailure):
        build_chosen(make_problem(), fixed_accuracy(1.0), 1, rng, max_retries=10)


def test_build_chosen_rejects_k_above_cap(rng):
    with pytest.raises(ValueError):
        build_chosen(make_problem(), SimulatedGenerator(), 3, rng, k_max=2)


def test_strategy_balance():
    gen = SimulatedGenerator()
    rng = np.random.default_rng(8)
    strategies = []
    for i in range(200):
        rec = build_chosen(make_problem(level=5, pid=f"b{i}"), gen, 4, rng)
        strategies += [s.strategy for s in rec.trajectory.steps if s.kind is StepKind.VERIFY]
    assert len(strategies) >= 500
    share = strategies.count(VerifyStrategy.CONTRADICTION) / len(strategies)
    assert 0.45 <= share <= 0.55


def test_build_rejected_wrong_final(rng):
    p = make_problem(level=4)
    for _ in range(50):
        rec = build_rejected(p, SimulatedGenerator(), rng, mode=WRONG_FINAL)
        assert rec.label == REJECTED
        assert not grade(p, rec.final_answer)
        assert is_valid(rec.trajectory)
        assert rec.trajectory.steps[-1].verdict is C
        assert parse(rec.text, p.id) == rec.trajectory


def test_build_rejected_corrupted_fails_to_parse(rng):
    p = make_problem(level=3)
    for _ in range(50):
        rec = build_rejected(p, SimulatedGenerator(), rng, mode=CORRUPTED)
        with pytest.raises(TrajectoryError):
            parse(rec.text, p.id)


def test_build_rejected_both_modes_occur(rng):
    p = make_problem(level=3)
    modes = {build_rejected(p, SimulatedGenerator(), rng).mode for _ in range(200)}
    assert modes == {WRONG_FINAL, CORRUPTED}


def test_simulate_trajectory_is_valid(rng):
    gen = SimulatedGenerator()
    for level in range(1, 6):
        for _ in range(50):
            assert is_valid(simulate_trajectory(make_problem(level=level), gen, rng))


def chosen_record(p):
    y = Trajectory(p.id, [solve(p.gt_answer), verify(C, VerifyStrategy.DIRECT_DERIVATION)])
    return SftRecord(p.id, y, CHOSEN, p.level, 0, render(y))


def rejected_record(p):
    wrong = next(a for a in p.answer_space if a != p.gt_answer)
    y = Trajectory(p.id, [solve(wrong), verify(C, VerifyStrategy.CONTRADICTION)])
    return SftRecord(p.id, y, REJECTED, p.level, 0, render(y), WRONG_FINAL)


def test_emit_ten_pairs(tmp_path):
    ps = [make_problem(gt=i % 5, pid=f"e{i}") for i in range(10)]
    records = [chosen_record(p) for p in ps] + [rejected_record(p) for p in ps]
    pairs = emit_datasets(records, tmp_path, {p.id: p for p in ps}, SimulatedTeacher())
    assert len(pairs) == 10
    assert all(pair.teacher_margin == pytest.approx(0.6 + 0.2) for pair in pairs)
    assert len(read_pairs(tmp_path / "seed_pairs.jsonl")) == 10


def test_emit_chosen_without_rejected(tmp_path):
    ps = [make_problem(pid="a"), make_problem(pid="b")]
    records = [chosen_record(ps[0]), chosen_record(ps[1]), rejected_record(ps[0])]
    pairs = emit_datasets(records, tmp_path, {p.id: p for p in ps}, SimulatedTeacher())
    assert [pair.problem_id for pair in pairs] == ["a"]
    assert [r.problem_id for r in read_sft(tmp_path / "sft.jsonl")] == ["a", "b"]


def test_emit_round_trip(tmp_path):
    ps = gen_problems(EnvConfig(counts_per_level=(3,) * 5))
    records, _ = build_corpus(ps, SimulatedGenerator(), seed=5)
    pairs = emit_datasets(records, tmp_path, {p.id: p for p in ps}, SimulatedTeacher())
    chosen = [r for r in records if r.label == CHOSEN]
    back = read_sft(tmp_path / "sft.jsonl")
    assert [(r.problem_id, r.trajectory, r.level, r.k, r.text) for r in back] == [
        (r.problem_id, r.trajectory, r.level, r.k, r.text) for r in chosen
    ]
    assert read_pairs(tmp_path / "seed_pairs.jsonl") == pairs
    keys = set(json.loads((tmp_path / "sft.jsonl").read_text().splitlines()[0]))
    assert keys == {"problem_id", "label", "level", "k", "trajectory_text", "final_answer"}


def test_corrupted_records_never_pair():
    ps = gen_problems(EnvConfig(counts_per_level=(4,) * 5))
    records, stats = build_corpus(ps, SimulatedGenerator(), seed=2)
    pairs = seed_pairs(records, {p.id: p for p in ps}, SimulatedTeacher())
    assert stats.corrupted > 0
    assert all(is_valid(pair.y_lose) and not grade(ps[int(pair.problem_id[1:])], pair.y_lose.final_answer) for pair in pairs)


def test_corpus_independent_of_jobs():
    ps = gen_problems(EnvConfig(counts_per_level=(2,) * 5))
    a, _ = build_corpus(ps, SimulatedGenerator(), seed=9, jobs=1)
    b, _ = build_corpus(ps, SimulatedGenerator(), seed=9, jobs=4)
    assert a == b


def test_mean_k_non_decreasing_in_level():
    ps = gen_problems(EnvConfig(counts_per_level=(20,) * 5))
    records, _ = build_corpus(ps, SimulatedGenerator(), seed=0)
    chosen = [r for r in records if r.label == CHOSEN]
    mean_k = [np.mean([r.k for r in chosen if r.level == lv] or [np.nan]) for lv in range(1, 6)]
    present = [m for m in mean_k if not np.isnan(m)]
    assert present == sorted(present)
