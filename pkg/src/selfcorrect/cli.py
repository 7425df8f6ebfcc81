"""Command-line entry point: gen-env, build-data, sft, dpo, eval, full-pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from collections.abc import Callable
from pathlib import Path

from pydantic import ValidationError

from .config import RunConfig, load_config
from .construction import CHOSEN, build_corpus, read_sft, seed_pairs, write_sft
from .dpo import PreferenceBuffer, read_pairs, run_pipeline, split_pairs, write_pairs
from .env import Problem, gen_problems, read_problems, write_problems
from .metrics import behavior_report, emit_report, policy_corpus, write_plot_table
from .oracles import RemoteGenerator, SimulatedGenerator, SimulatedTeacher
from .policy import PolicyParams, train_sft
from .trajectory import AutomatonMode

log = logging.getLogger("selfcorrect")

EXIT_CONFIG, EXIT_MISSING, EXIT_FAILURE = 2, 3, 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        self.kind = kind
        self.code = code
        super().__init__(message)


def _atomic_write(path: Path, write: Callable[[Path], None]) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _require(out: Path, *names: str) -> list[Path]:
    paths = [out / n for n in names]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        raise CliError("missing_artifact", f"missing upstream artifact(s) in {out}: {', '.join(missing)}", EXIT_MISSING)
    return paths


def _require_canonical(cfg: RunConfig) -> None:
    if cfg.mode is not AutomatonMode.CANONICAL:
        raise CliError("config", "training and evaluation run on the canonical automaton only", EXIT_CONFIG)


def _problem_map(problems: list[Problem]) -> dict[str, Problem]:
    return {p.id: p for p in problems}


def _generator(cfg: RunConfig):
    if cfg.oracle.kind == "remote":
        return RemoteGenerator(cfg.remote_config())
    return SimulatedGenerator(cfg.env_config())


# --------------------------------------------------------------------------- subcommands


def cmd_gen_env(cfg: RunConfig, args) -> dict:
    out = Path(cfg.output_dir)
    problems = gen_problems(cfg.env_config())
    _atomic_write(out / "problems.jsonl", lambda p: write_problems(p, problems))
    return {"problems": len(problems)}


def cmd_build_data(cfg: RunConfig, args) -> dict:
    _require_canonical(cfg)
    out = Path(cfg.output_dir)
    (problems_path,) = _require(out, "problems.jsonl")
    problems = read_problems(problems_path)
    gen = _generator(cfg)
    records, stats = build_corpus(
        problems,
        gen,
        cfg.data_seed,
        jobs=args.jobs,
        accuracy_samples=cfg.data.accuracy_samples,
        max_retries=cfg.data.max_retries,
        rejected_attempts=cfg.data.rejected_attempts,
        k_max=cfg.k_max,
    )
    if not any(r.label == CHOSEN for r in records):
        raise CliError("construction", "no chosen trajectories could be built", EXIT_FAILURE)
    pairs = seed_pairs(records, _problem_map(problems), SimulatedTeacher(cfg.mode, cfg.k_max), cfg.k_max)
    _atomic_write(out / "sft.jsonl", lambda p: write_sft(p, records))
    _atomic_write(out / "seed_pairs.jsonl", lambda p: write_pairs(p, pairs))
    summary = {**stats.to_dict(), "seed_pairs": len(pairs)}
    _atomic_write(out / "data_stats.json", lambda p: p.write_text(json.dumps(summary, indent=2, default=str) + "\n"))
    if isinstance(gen, RemoteGenerator):
        _atomic_write(out / "remote_calls.jsonl", lambda p: p.write_text(
            "".join(json.dumps(c.to_dict()) + "\n" for c in gen.call_log)
        ))
        gen.close()
    return {"chosen": stats.chosen, "rejected": stats.rejected, "seed_pairs": len(pairs), "failures": len(stats.failures)}


def cmd_sft(cfg: RunConfig, args) -> dict:
    _require_canonical(cfg)
    out = Path(cfg.output_dir)
    problems_path, sft_path = _require(out, "problems.jsonl", "sft.jsonl")
    problems = _problem_map(read_problems(problems_path))
    records = read_sft(sft_path, cfg.k_max)
    if not records:
        raise CliError("empty_dataset", "sft.jsonl holds no records", EXIT_FAILURE)
    params, losses = train_sft(
        PolicyParams.zeros(cfg.env.A),
        problems,
        [r.trajectory for r in records],
        lr=cfg.sft.lr,
        steps=cfg.sft.steps,
        mask_weight=cfg.sft.mask_weight,
        k_max=cfg.k_max,
    )
    _atomic_write(out / "sft_params.json", params.save)
    _atomic_write(out / "sft_losses.json", lambda p: p.write_text(json.dumps(losses) + "\n"))
    return {"records": len(records), "initial_loss": losses[0], "final_loss": losses[-1]}


def cmd_dpo(cfg: RunConfig, args) -> dict:
    _require_canonical(cfg)
    out = Path(cfg.output_dir)
    problems_path, pairs_path, sft_params_path = _require(out, "problems.jsonl", "seed_pairs.jsonl", "sft_params.json")
    problem_list = read_problems(problems_path)
    problems = _problem_map(problem_list)
    pairs = read_pairs(pairs_path, cfg.k_max)
    sft_params = PolicyParams.load(sft_params_path)
    dcfg = cfg.dpo_config(getattr(args, "mode", None))
    train, heldout = split_pairs(pairs, dcfg.heldout_fraction, dcfg.seed)
    held_ids = {p.problem_id for p in heldout}
    prompts = [p for p in problem_list if p.id not in held_ids]
    buffer = PreferenceBuffer(dcfg.buffer_capacity, dcfg.eviction)
    teacher = SimulatedTeacher(cfg.mode, cfg.k_max)
    params, history = run_pipeline(
        dcfg, train, prompts, teacher, sft_params, problems,
        heldout=heldout, k_max=cfg.k_max, jobs=args.jobs, buffer=buffer,
    )
    _atomic_write(out / "final_params.json", params.save)
    _atomic_write(out / "history.jsonl", lambda p: p.write_text("".join(json.dumps(h) + "\n" for h in history)))
    _atomic_write(out / "buffer.jsonl", lambda p: write_pairs(p, list(buffer)))
    return {
        "mode": dcfg.mode.value,
        "heldout_pairs": len(heldout),
        "heldout_pref_acc_start": history[0]["heldout_pref_acc"],
        "heldout_pref_acc_end": history[-1]["heldout_pref_acc"],
    }


def cmd_eval(cfg: RunConfig, args) -> dict:
    _require_canonical(cfg)
    out = Path(cfg.output_dir)
    (problems_path,) = _require(out, "problems.jsonl")
    problems = read_problems(problems_path)
    if getattr(args, "params", None):
        targets = [("eval", Path(args.params), "report")]
        if not targets[0][1].exists():
            raise CliError("missing_artifact", f"params file not found: {args.params}", EXIT_MISSING)
    else:
        # the final policy owns report.*; the cold-start policy is reported alongside for comparison
        targets = [("sft", out / "sft_params.json", "report_sft"), ("final", out / "final_params.json", "report")]
        targets = [t for t in targets if t[1].exists()]
        if not targets:
            raise CliError("missing_artifact", f"no sft_params.json or final_params.json in {out}", EXIT_MISSING)
    summary, rows = {}, []
    for name, path, stem in targets:
        params = PolicyParams.load(path)
        corpus = policy_corpus(params, problems, cfg.eval.samples_per_problem, cfg.eval_seed, cfg.k_max)
        report = behavior_report(corpus)
        for fmt in ("json", "csv"):
            _atomic_write(out / f"{stem}.{fmt}", lambda p, r=report, f=fmt: emit_report(r, p, f))
        rows.extend((name, r) for r in report.levels)
        summary[name] = {
            "verification_accuracy": report.verification_accuracy.value,
            "error_recall": report.error_recall.value,
            "level_accuracy": {r.level: r.answer_accuracy for r in report.levels},
            "level_attempts": {r.level: r.mean_attempts for r in report.levels},
        }
    _atomic_write(out / "difficulty.csv", lambda p: write_plot_table(rows, p))
    return summary


def cmd_full(cfg: RunConfig, args) -> dict:
    out = {}
    for name, fn in (("gen-env", cmd_gen_env), ("build-data", cmd_build_data), ("sft", cmd_sft), ("dpo", cmd_dpo), ("eval", cmd_eval)):
        out[name] = fn(cfg, args)
    return out


COMMANDS = {
    "gen-env": cmd_gen_env,
    "build-data": cmd_build_data,
    "sft": cmd_sft,
    "dpo": cmd_dpo,
    "eval": cmd_eval,
    "full-pipeline": cmd_full,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfcorrect", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults used when omitted)")
    common.add_argument("--output-dir", help="override output_dir")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for per-problem work (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("dpo", "full-pipeline"):
            p.add_argument("--mode", choices=("semi_online", "offline"), help="override dpo.mode")
        if name == "eval":
            p.add_argument("--params", help="params checkpoint to evaluate (default: sft and final in output dir)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise CliError("config", "--jobs must be >= 1", EXIT_CONFIG)
        try:
            cfg = load_config(args.config, output_dir=args.output_dir, seed=args.seed)
        except (ValidationError, json.JSONDecodeError, ValueError) as exc:
            raise CliError("config", str(exc), EXIT_CONFIG) from exc
        except FileNotFoundError as exc:
            raise CliError("missing_artifact", str(exc), EXIT_MISSING) from exc
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps({"command": args.command, "output_dir": cfg.output_dir, "result": result}, default=str))
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
