"""Hand-written controllers that solve each task through the machine's action interface.

They exist to validate the environment stack end to end: tape semantics,
module tables and task layouts.  Cursor positions are recovered from the
previous-head positions and the landmarks, the same information the learned
controller sees.  Two pieces of task bookkeeping are worked out from the tape
instead: the filter write cursor (number of filled target cells) and the
addition carry (recomputed from the untouched operand digits).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .machine import Action, MachineState, apply_action, check_action, check_halt, init_machine, render_trace
from .modules import ModuleSpec, pool_for_task
from .tasks import TaskInstance, TaskKind, generate
from .tokens import EMPTY, is_digit

# module indices inside the task pools
_RESET, _IDENTITY, _INCREMENT, _MAX, _SUM = range(5)
_ADD_SUM, _ADD_SUMINC = 0, 1


class OracleError(RuntimeError):
    pass


class OracleFailure(AssertionError):
    """The oracle could not solve an instance; carries the rendered final state."""

    def __init__(self, message: str, trace: str):
        super().__init__(f"{message}\n{trace}")
        self.trace = trace


def _copy_layout(state: MachineState) -> int:
    L = len(state.tape)
    if len(state.landmarks) != 4:
        raise OracleError("state does not have the copy-family landmark layout")
    n = state.landmarks[2]
    if L != 2 * n + 1 or state.landmarks[1] != 0 or state.landmarks[3] != L - 1:
        raise OracleError("state does not have the copy-family tape layout")
    return n


def _add_layout(state: MachineState) -> int:
    L = len(state.tape)
    if len(state.landmarks) != 5:
        raise OracleError("state does not have the addition landmark layout")
    n = state.landmarks[2] - 1
    if n < 1 or L != 3 * n + 4 or state.landmarks[3] != 2 * n + 2 or state.landmarks[4] != L - 1:
        raise OracleError("state does not have the addition tape layout")
    return n


def _carry_into(tape: Sequence[int], n: int, column: int) -> int:
    """Carry entering ``column`` (0 = least significant) from the operand digits."""
    if column == 0:
        return 0
    a = int("".join(str(d) for d in tape[n + 1 - column:n + 1]))
    b = int("".join(str(d) for d in tape[2 * n + 2 - column:2 * n + 2]))
    return int(a + b >= 10 ** column)


def _top_digit_action(tape: Sequence[int], n: int, want: int) -> Action:
    sep, top = 2 * n + 2, 2 * n + 3
    if want == 0:
        # Sum on non-digit operands yields '0'
        return Action(_ADD_SUM, (sep, sep), (top,))
    digits = [i for i, t in enumerate(tape) if is_digit(t, 10)]
    for i in digits:
        for j in digits:
            if j < i:
                continue
            s = tape[i] + tape[j]
            if (s + 1) % 10 == want:
                return Action(_ADD_SUMINC, (i, j), (top,))
            if s % 10 == want:
                return Action(_ADD_SUM, (i, j), (top,))
    # no usable pair yet: write '0' first, then SumInc('0', '0') next step
    return Action(_ADD_SUM, (sep, sep), (top,))


def oracle_action(kind, state: MachineState) -> Action:
    kind = TaskKind(kind)
    tape = state.tape
    if kind is TaskKind.ADD:
        n = _add_layout(state)
        last = 3 * n + 3
        col = 0 if state.prev_writes is None else min(last - state.prev_writes[0] + 1, n)
        if col < n:
            a_pos, b_pos = n - col, 2 * n + 1 - col
            module = _ADD_SUMINC if _carry_into(tape, n, col) else _ADD_SUM
            return Action(module, (a_pos, b_pos), (last - col,))
        return _top_digit_action(tape, n, _carry_into(tape, n, n))

    n = _copy_layout(state)
    if kind is TaskKind.FILTER_EVEN:
        r = 0 if state.prev_reads is None else state.prev_reads[0] + 1
        if r >= n:
            raise OracleError("filter oracle ran past the end of the input")
        w = sum(1 for p in range(n + 1, 2 * n + 1) if tape[p] != EMPTY)
        if tape[r] % 2 == 0:
            return Action(_IDENTITY, (r, r), (n + 1 + w,))
        # odd digit: rewrite the cell onto itself, only the read cursor advances
        return Action(_IDENTITY, (r, r), (r,))

    i = 0 if state.prev_writes is None else state.prev_writes[0] - n
    if not 0 <= i < n:
        raise OracleError(f"write cursor {i} outside the target region")
    if kind is TaskKind.COPY:
        return Action(_IDENTITY, (i, i), (n + 1 + i,))
    if kind is TaskKind.REVERSE:
        src = n - 1 - i
        return Action(_IDENTITY, (src, src), (n + 1 + i,))
    return Action(_INCREMENT, (i, i), (n + 1 + i,))


@dataclass
class OraclePolicy:
    kind: TaskKind

    def __post_init__(self):
        self.kind = TaskKind(self.kind)

    def act(self, state: MachineState) -> Action:
        return oracle_action(self.kind, state)


@dataclass
class OracleEpisode:
    instance: TaskInstance
    states: list[MachineState]
    actions: list[Action]
    success: bool

    @property
    def steps(self) -> int:
        return len(self.actions)


def run_oracle(instance: TaskInstance, max_steps: Optional[int] = None,
               pool: Optional[Sequence[ModuleSpec]] = None) -> OracleEpisode:
    pool = pool_for_task(instance.kind) if pool is None else pool
    max_steps = 3 * instance.length if max_steps is None else max_steps
    state = init_machine(instance)
    states, actions = [state], []
    done = check_halt(state, instance)
    while not done and len(actions) < max_steps:
        action = oracle_action(instance.kind, state)
        check_action(state, action, pool)
        state = apply_action(state, action, pool)
        states.append(state)
        actions.append(action)
        done = check_halt(state, instance)
    return OracleEpisode(instance, states, actions, done)


@dataclass
class OracleReport:
    kind: TaskKind
    steps: dict[int, int] = field(default_factory=dict)
    lengths: dict[int, int] = field(default_factory=dict)

    @property
    def passed(self) -> int:
        return len(self.steps)

    @property
    def max_steps(self) -> int:
        return max(self.steps.values(), default=0)

    @property
    def max_step_ratio(self) -> float:
        return max((s / self.lengths[n] for n, s in self.steps.items()), default=0.0)

    def summary(self) -> str:
        return f"{self.kind}: {self.passed}/{len(self.lengths)} lengths OK"


def verify_environment(kind, max_len: int, seed: int = 0,
                       pool: Optional[Sequence[ModuleSpec]] = None) -> OracleReport:
    """Drive one generated instance per length 1..max_len with the oracle."""
    kind = TaskKind(kind)
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    rng = np.random.default_rng(seed)
    report = OracleReport(kind)
    for n in range(1, max_len + 1):
        instance = generate(kind, n, rng)
        report.lengths[n] = instance.length
        try:
            ep = run_oracle(instance, pool=pool)
        except Exception as exc:  # noqa: BLE001 - any fault is a verification failure
            trace = f"{instance}\n{type(exc).__name__}: {exc}"
            raise OracleFailure(f"{kind} n={n}: oracle crashed", trace) from exc
        if not ep.success:
            raise OracleFailure(f"{kind} n={n}: not solved within {3 * instance.length} steps",
                                render_trace(ep.states[-1]))
        report.steps[n] = ep.steps
    return report
