"""Command-line entry point: ``modmachine <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from typing import Optional, Sequence

import numpy as np

from .tasks import TaskKind

log = logging.getLogger("modmachine")


def _cmd_train(args) -> int:
    from .trainer import TrainConfig, actor_learner_loop

    config = TrainConfig.load(args.config)
    if args.steps is not None:
        config.total_steps = args.steps
    if args.log is not None:
        config.log_path = args.log
    if args.checkpoint_dir is not None:
        config.checkpoint_dir = args.checkpoint_dir
    start = time.perf_counter()
    result = actor_learner_loop(config)
    print(f"trained {result.env_steps} env steps in {result.updates} updates "
          f"({time.perf_counter() - start:.0f}s)")
    if result.best_rate is not None:
        print(f"best eval rate: {result.best_rate:.2f}")
    for path in result.checkpoints[-1:]:
        print(f"checkpoint: {path}")
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import EvalDataset, evaluate, write_reports
    from .trainer import TrainConfig

    params, meta = load_checkpoint(args.checkpoint, requires_grad=False)
    dataset = EvalDataset.load(args.dataset)
    config = TrainConfig(task=dataset.kind.value, encoder=params.encoder.value)
    report = evaluate(params, dataset, config, rng=np.random.default_rng(args.seed),
                      greedy=args.greedy, version=meta.get("version"))
    print(f"{dataset.kind} n={dataset.length}: {report.num_passed}/{len(report.passes)} "
          f"success rate {report.rate:.2f}")
    if args.report:
        write_reports(args.report, [report])
    return 0


def _cmd_gen_eval_set(args) -> int:
    from .evaluation import build_eval_set

    dataset = build_eval_set(args.task, args.length, args.seed, size=args.size)
    dataset.save(args.out)
    print(f"wrote {len(dataset)} {dataset.kind} instances of length {dataset.length} to {args.out}")
    return 0


def _cmd_oracle_check(args) -> int:
    from .oracles import verify_environment

    kinds = list(TaskKind) if args.task == "all" else [TaskKind(args.task)]
    start = time.perf_counter()
    for kind in kinds:
        report = verify_environment(kind, args.max_len, seed=args.seed)
        print(report.summary())
        log.info("%s: max %d steps, max steps/L %.3f", kind, report.max_steps, report.max_step_ratio)
    log.info("oracle check took %.2fs", time.perf_counter() - start)
    return 0


def _cmd_trace(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import check_compatible
    from .machine import init_machine, render_trace
    from .tasks import generate
    from .trainer import TrainConfig, run_episode

    params, _ = load_checkpoint(args.checkpoint, requires_grad=False)
    check_compatible(params, args.task)
    rng = np.random.default_rng(args.seed)
    instance = generate(args.task, args.n, rng)
    config = TrainConfig(task=args.task, encoder=params.encoder.value)
    frames = []
    trace = run_episode(params, instance, config, rng, greedy=args.greedy,
                        on_step=lambda state: frames.append(render_trace(state)))
    print(render_trace(init_machine(instance)))
    for frame in frames:
        print()
        print(frame)
    print()
    print(f"{'solved' if trace.success else 'not solved'} in {trace.length} steps")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, run_suite

    results = run_suite(shapes=args.shapes, seed=args.seed, include_loss=not args.ops_only)
    print(format_table(results))
    failed = [r for r in results if not r.ok]
    if failed:
        print(f"error: {len(failed)} gradient checks above tolerance", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modmachine", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    tasks = [k.value for k in TaskKind]

    p = sub.add_parser("train", help="train a controller from a JSON config")
    p.add_argument("config")
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--log", help="override log_path")
    p.add_argument("--checkpoint-dir")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="success rate of a checkpoint on an eval set")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--greedy", action="store_true", help="act with argmax instead of sampling")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="append the report record to this file")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gen-eval-set", help="write a fixed evaluation set")
    p.add_argument("--task", required=True, choices=tasks)
    p.add_argument("--length", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_eval_set)

    p = sub.add_parser("oracle-check", help="solve every length with the hand-written oracle")
    p.add_argument("task", choices=tasks + ["all"])
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_oracle_check)

    p = sub.add_parser("trace", help="render one episode of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("task", choices=tasks)
    p.add_argument("-n", type=int, required=True, help="input length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--greedy", action="store_true")
    p.set_defaults(func=_cmd_trace)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the loss")
    p.add_argument("--shapes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true", help="skip the (slow) full-loss checks")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, IndexError, AssertionError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
