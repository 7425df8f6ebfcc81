import json
from collections import Counter

import httpx
import numpy as np
import pytest

from selfcorrect.env import DEFAULT_CONFUSION, Confusion, EnvConfig
from selfcorrect.oracles import (
    CallRecord,
    RemoteEndpointConfig,
    RemoteError,
    RemoteGenerator,
    SimulatedGenerator,
    SimulatedTeacher,
    build_messages,
    remote_generate,
    simulated_solve,
    simulated_verify,
    teacher_score,
)
from selfcorrect.trajectory import StepKind, Trajectory, Verdict, VerifyStrategy, rectify, solve, verify

from conftest import make_problem

DRAWS = 10_000
C, I = Verdict.CORRECT, Verdict.INCORRECT
DIRECT, CONTRA = VerifyStrategy.DIRECT_DERIVATION, VerifyStrategy.CONTRADICTION


def test_solve_perfect_accuracy(problem, rng):
    assert all(simulated_solve(problem, rng, 1.0).answer == problem.gt_answer for _ in range(500))


def test_solve_zero_accuracy_uniform_over_wrong(rng):
    p = make_problem(A=5, gt=2)
    counts = Counter(simulated_solve(p, rng, 0.0).answer for _ in range(DRAWS))
    assert p.gt_answer not in counts
    for a in ("0", "1", "3", "4"):
        assert abs(counts[a] / DRAWS - 0.25) <= 0.02


def test_solve_level5_default_accuracy(rng):
    p = make_problem(level=5)
    gen = SimulatedGenerator()
    hits = sum(gen.solve(p, (), rng).answer == p.gt_answer for _ in range(DRAWS))
    assert abs(hits / DRAWS - 0.2) <= 0.02


def test_verify_direct_on_wrong_answer(rng):
    p = make_problem(gt=0)
    says_correct = sum(simulated_verify(p, "3", DIRECT, rng).verdict is C for _ in range(DRAWS))
    assert abs(says_correct / DRAWS - 0.40) <= 0.02


@pytest.mark.parametrize("strategy,answer,expected", [
    (DIRECT, "0", 0.95), (CONTRA, "0", 0.85), (CONTRA, "1", 0.15),
])
def test_verify_confusion_rows(rng, strategy, answer, expected):
    p = make_problem(gt=0)
    says_correct = sum(simulated_verify(p, answer, strategy, rng).verdict is C for _ in range(DRAWS))
    assert abs(says_correct / DRAWS - expected) <= 0.02


def test_verify_identity_confusion(rng):
    p = make_problem(gt=0)
    ident = {k: Confusion(1.0, 0.0) for k in ("direct", "contradiction")}
    for s in (DIRECT, CONTRA):
        assert all(simulated_verify(p, "0", s, rng, ident).verdict is C for _ in range(200))
        assert all(simulated_verify(p, "1", s, rng, ident).verdict is I for _ in range(200))


def test_contradiction_has_higher_recall():
    assert DEFAULT_CONFUSION["contradiction"].error_recall == pytest.approx(0.85)
    assert DEFAULT_CONFUSION["direct"].error_recall == pytest.approx(0.60)


def test_simulated_generator_steps(rng):
    p = make_problem(A=3, level=2)
    gen = SimulatedGenerator(EnvConfig(A=3))
    assert gen.solve(p, (), rng).kind is StepKind.SOLVE
    assert gen.rectify(p, (), rng).kind is StepKind.RECTIFY
    v = gen.verify(p, "1", CONTRA, rng)
    assert v.kind is StepKind.VERIFY and v.strategy is CONTRA


def test_simulated_is_deterministic_under_rng_state(problem):
    a = [simulated_solve(problem, np.random.default_rng(5), 0.5).answer for _ in range(20)]
    assert len(set(a)) == 1


# teacher


def test_teacher_perfect_trajectory():
    p = make_problem(gt=2)
    y = Trajectory(p.id, [solve("1"), verify(I), rectify("2"), verify(C)])
    s = teacher_score(p, y)
    assert (s.correctness, s.format_valid, s.verification_quality) == (1, 1, 1.0)
    assert s.total == pytest.approx(1.0)


def test_teacher_wrong_final_all_verdicts_true():
    p = make_problem(gt=2)
    y = Trajectory(p.id, [solve("1"), verify(I), rectify("3"), verify(I)])
    assert teacher_score(p, y, k_max=1).total == pytest.approx(0.4)


def test_teacher_half_verification_quality():
    p = make_problem(gt=2)
    y = Trajectory(p.id, [solve("1"), verify(C), solve("2"), verify(C)])  # LITERAL-style trace
    s = teacher_score(p, y)
    assert s.verification_quality == 0.5
    assert s.format_valid == 0


def test_teacher_counts_calls(problem):
    t = SimulatedTeacher()
    y = Trajectory(problem.id, [solve("0"), verify(C)])
    t(problem, y)
    t(problem, y)
    assert t.calls == 2


# remote


def reply(content):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def mock_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


@pytest.fixture
def remote_cfg(monkeypatch):
    monkeypatch.delenv("SVSR_API_BASE", raising=False)
    monkeypatch.setenv("SVSR_API_KEY", "test-key")
    return RemoteEndpointConfig(base_url="http://model.test/v1", model="m", backoff=0.0, max_retries=2)


def test_remote_well_formed(remote_cfg, problem):
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return reply('<verify strategy="contradiction">Assume not.\nVerdict: INCORRECT</verify>')

    log = []
    step = remote_generate(
        remote_cfg, problem, (solve("3"),), StepKind.VERIFY, CONTRA, client=mock_client(handler), call_log=log
    )
    assert step.verdict is I and step.strategy is CONTRA
    assert seen["url"] == "http://model.test/v1/chat/completions"
    assert seen["auth"] == "Bearer test-key"
    assert set(seen["body"]) == {"model", "messages", "temperature"}
    assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]
    assert log[0].retries == 0 and log[0].error is None


def test_remote_missing_verdict_is_unparseable(remote_cfg, problem):
    client = mock_client(lambda r: reply("<verify>Looks right to me.</verify>"))
    log = []
    with pytest.raises(RemoteError) as err:
        remote_generate(remote_cfg, problem, (solve("3"),), StepKind.VERIFY, DIRECT, client=client, call_log=log)
    assert err.value.kind == RemoteError.UNPARSEABLE
    assert log[0].error.startswith("unparseable")


@pytest.mark.parametrize("content", [
    "<rectify>Answer: 1</rectify>",       # wrong kind for a solve request
    "<solve>Answer: 99</solve>",          # not in the answer space
    "I think it is 3.",
])
def test_remote_rejects_off_contract_content(remote_cfg, problem, content):
    with pytest.raises(RemoteError) as err:
        remote_generate(remote_cfg, problem, (), StepKind.SOLVE, client=mock_client(lambda r: reply(content)))
    assert err.value.kind == RemoteError.UNPARSEABLE


def test_remote_timeout_then_success(remote_cfg, problem):
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ReadTimeout("slow", request=request)
        return reply("<solve>Working.\nAnswer: 4</solve>")

    log: list[CallRecord] = []
    step = remote_generate(remote_cfg, problem, (), StepKind.SOLVE, client=mock_client(handler), call_log=log)
    assert step.answer == "4"
    assert log[0].retries == 1
    assert len(calls) == 2


def test_remote_gives_up_after_retries(remote_cfg, problem):
    def handler(request):
        raise httpx.ConnectError("down", request=request)

    with pytest.raises(RemoteError) as err:
        remote_generate(remote_cfg, problem, (), StepKind.SOLVE, client=mock_client(handler))
    assert err.value.kind == RemoteError.TRANSPORT and err.value.retries == 2


def test_remote_client_errors_not_retried(remote_cfg, problem):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, json={"error": "bad"})

    with pytest.raises(RemoteError) as err:
        remote_generate(remote_cfg, problem, (), StepKind.SOLVE, client=mock_client(handler))
    assert err.value.kind == RemoteError.HTTP and len(calls) == 1


def test_remote_server_errors_retried(remote_cfg, problem):
    codes = iter([503, 429, 200])

    def handler(request):
        code = next(codes)
        return reply("<solve>Answer: 1</solve>") if code == 200 else httpx.Response(code)

    log = []
    assert remote_generate(remote_cfg, problem, (), StepKind.SOLVE, client=mock_client(handler), call_log=log).answer == "1"
    assert log[0].retries == 2


def test_base_url_env_override(remote_cfg, problem, monkeypatch):
    monkeypatch.setenv("SVSR_API_BASE", "http://other.test/api/")
    urls = []

    def handler(request):
        urls.append(str(request.url))
        return reply("<solve>Answer: 0</solve>")

    remote_generate(remote_cfg, problem, (), StepKind.SOLVE, client=mock_client(handler))
    assert urls == ["http://other.test/api/chat/completions"]


def test_remote_generator_logs_calls(remote_cfg, problem, rng):
    gen = RemoteGenerator(remote_cfg, client=mock_client(lambda r: reply("<rectify>Answer: 2</rectify>")))
    assert gen.rectify(problem, (solve("1"), verify(I)), rng).answer == "2"
    assert len(gen.call_log) == 1 and gen.call_log[0].action == "rectify"
    assert "test-key" not in json.dumps([c.to_dict() for c in gen.call_log])


def test_messages_carry_hint_and_history(problem):
    msgs = build_messages(problem, (solve("3"), verify(I)), StepKind.RECTIFY, hint="The reference answer is 0.")
    assert "Let me try again." in msgs[0]["content"]
    assert "The reference answer is 0." in msgs[1]["content"]
    assert "Answer: 3" in msgs[1]["content"]


def test_endpoint_config_validation():
    with pytest.raises(ValueError):
        RemoteEndpointConfig(timeout=0)
    with pytest.raises(ValueError):
        RemoteEndpointConfig(max_retries=-1)
