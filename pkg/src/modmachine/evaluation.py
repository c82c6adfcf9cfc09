"""Length-generalization evaluation and trial aggregation."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .machine import MachineState, apply_action, check_halt, init_machine
from .modules import pool_for_task
from .policy import PolicyParams
from .tasks import (EVALSET_HEADER, TaskInstance, TaskKind, format_instance_line, generate,
                    parse_instance_line)
from .trainer import TrainConfig, context_shape, run_episodes, t_max

EVAL_SIZE = 100
EVAL_LENGTHS = (10, 20, 100)
REPORT_VERSION = 1


class ShapeMismatch(ValueError):
    """Checkpoint network shape does not fit the task's context encoding."""


@dataclass(frozen=True)
class EvalDataset:
    kind: TaskKind
    length: int
    seed: int
    instances: tuple[TaskInstance, ...]

    def __len__(self) -> int:
        return len(self.instances)

    def lines(self) -> list[str]:
        return [format_instance_line(inst, self.seed) for inst in self.instances]

    def save(self, path: Union[str, os.PathLike]) -> None:
        with open(path, "w") as fh:
            fh.write(EVALSET_HEADER + "\n")
            for line in self.lines():
                fh.write(line + "\n")

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "EvalDataset":
        with open(path) as fh:
            rows = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not rows or rows[0] != EVALSET_HEADER:
            raise ValueError(f"{path}: missing eval-set header {EVALSET_HEADER!r}")
        parsed = [parse_instance_line(ln) for ln in rows[1:]]
        if not parsed:
            raise ValueError(f"{path}: empty eval set")
        instances = tuple(inst for inst, _ in parsed)
        kinds = {inst.kind for inst in instances}
        lengths = {inst.difficulty for inst in instances}
        if len(kinds) != 1 or len(lengths) != 1:
            raise ValueError(f"{path}: eval set mixes tasks or lengths")
        return cls(instances[0].kind, instances[0].difficulty, parsed[0][1], instances)


def build_eval_set(kind, length: int, seed: int, size: int = EVAL_SIZE) -> EvalDataset:
    if length < 1:
        raise ValueError("length must be >= 1")
    kind = TaskKind(kind)
    rng = np.random.default_rng([seed, length, list(TaskKind).index(kind)])
    instances = tuple(generate(kind, length, rng) for _ in range(size))
    return EvalDataset(kind, length, seed, instances)


@dataclass
class EvalReport:
    kind: TaskKind
    length: int
    passes: list[bool]
    version: Optional[int] = None
    best_rate: Optional[float] = None

    @property
    def rate(self) -> float:
        return sum(self.passes) / len(self.passes)

    @property
    def num_passed(self) -> int:
        return sum(self.passes)

    def to_record(self) -> dict:
        return {
            "format": REPORT_VERSION,
            "task": str(self.kind),
            "length": self.length,
            "rate": self.rate,
            "passed": self.num_passed,
            "total": len(self.passes),
            "best_rate": self.best_rate,
            "version": self.version,
            "passes": "".join("1" if p else "0" for p in self.passes),
        }


def check_compatible(params: PolicyParams, kind) -> None:
    shape = context_shape(kind, params.dims.reads, params.dims.writes)
    dims = params.dims
    got = (dims.channels, dims.xi_width, dims.num_modules)
    want = (shape.channels, shape.xi_width, shape.num_modules)
    if got != want:
        raise ShapeMismatch(
            f"checkpoint expects channels/xi/modules {got} but task {TaskKind(kind)} needs {want}")


def run_policy(policy, instance: TaskInstance, max_steps: int) -> tuple[bool, MachineState]:
    """Roll out any object with ``act(state) -> Action`` under the halting check."""
    pool = pool_for_task(instance.kind)
    state = init_machine(instance)
    done = check_halt(state, instance)
    while not done and state.step < max_steps:
        state = apply_action(state, policy.act(state), pool)
        done = check_halt(state, instance)
    return done, state


def evaluate(policy, dataset: EvalDataset, config: Optional[TrainConfig] = None,
             rng: Optional[np.random.Generator] = None, greedy: bool = False,
             version: Optional[int] = None) -> EvalReport:
    """Success rate of ``policy`` (PolicyParams or an ``act`` object) on the dataset.

    Never mutates the policy or the dataset.
    """
    config = config or TrainConfig(task=dataset.kind.value)
    rng = rng if rng is not None else np.random.default_rng(0)
    passes = []
    if isinstance(policy, PolicyParams):
        check_compatible(policy, dataset.kind)
        traces = run_episodes(policy, dataset.instances, config, rng, greedy=greedy)
        passes = [tr.success for tr in traces]
    else:
        for inst in dataset.instances:
            ok, _ = run_policy(policy, inst, t_max(inst.length, config.t_max_factor))
            passes.append(ok)
    return EvalReport(dataset.kind, dataset.length, passes, version=version)


def track_best(rates: Iterable[Union[float, EvalReport]]) -> list[float]:
    """Running best-so-far success rate; empty input gives an empty series."""
    out: list[float] = []
    best = -math.inf
    for r in rates:
        value = r.rate if isinstance(r, EvalReport) else float(r)
        best = max(best, value)
        out.append(best)
    return out


def best_rate(rates: Iterable[Union[float, EvalReport]]) -> Optional[float]:
    series = track_best(rates)
    return series[-1] if series else None


@dataclass(frozen=True)
class TrialSummary:
    rates: tuple[float, ...]
    mean: float
    std: float
    perfect: int
    single_trial: bool = False

    @property
    def trials(self) -> int:
        return len(self.rates)

    def to_text(self) -> str:
        return json.dumps({
            "format": REPORT_VERSION, "trials": self.trials, "mean": self.mean, "std": self.std,
            "perfect": self.perfect, "single_trial": self.single_trial, "rates": list(self.rates),
        }, indent=2)


def summarize_trials(rates: Sequence[float]) -> TrialSummary:
    if not rates:
        raise ValueError("need at least one trial")
    arr = np.asarray(rates, dtype=np.float64)
    single = len(arr) == 1
    std = 0.0 if single else float(np.std(arr, ddof=1))
    return TrialSummary(tuple(float(r) for r in arr), float(arr.mean()), std,
                        int(np.sum(arr == 1.0)), single)


def write_reports(path: Union[str, os.PathLike], reports: Sequence[EvalReport]) -> None:
    with open(path, "a") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_record()) + "\n")
