"""The discrete tape machine: state, the single-step update and the halting check."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .modules import ModuleSpec
from .tasks import TaskInstance
from .tokens import tape_to_str


class IllegalAction(ValueError):
    """Action outside the machine's action space; ends the episode as a failure."""


@dataclass(frozen=True)
class HeadConfig:
    reads: int = 2
    writes: int = 1

    def __post_init__(self):
        if self.reads < 1 or self.writes < 1:
            raise ValueError("need at least one read head and one write head")

    @property
    def total(self) -> int:
        return self.reads + self.writes


@dataclass(frozen=True)
class Action:
    module: int
    reads: tuple[int, ...]
    writes: tuple[int, ...]

    @property
    def heads(self) -> tuple[int, ...]:
        return self.reads + self.writes


@dataclass(frozen=True)
class MachineState:
    tape: tuple[int, ...]
    landmarks: tuple[int, ...]
    heads: HeadConfig = field(default_factory=HeadConfig)
    prev_module: Optional[int] = None
    prev_reads: Optional[tuple[int, ...]] = None
    prev_writes: Optional[tuple[int, ...]] = None
    step: int = 0
    task: str = ""

    @property
    def length(self) -> int:
        return len(self.tape)


def init_machine(instance: TaskInstance, heads: HeadConfig = HeadConfig()) -> MachineState:
    L = len(instance.initial_tape)
    if L < 1:
        raise ValueError("tape must have at least one cell")
    for p in (*instance.landmarks, *instance.target_positions):
        if not 0 <= p < L:
            raise ValueError(f"position {p} outside tape of length {L}")
    if len(instance.expected) != len(instance.target_positions):
        raise ValueError("expected output and target positions disagree in length")
    return MachineState(
        tape=tuple(instance.initial_tape),
        landmarks=(0, *instance.landmarks, L - 1),
        heads=heads,
        task=str(instance.kind),
    )


def check_action(state: MachineState, action: Action, pool: Sequence[ModuleSpec]) -> None:
    L = len(state.tape)
    if not 0 <= action.module < len(pool):
        raise IllegalAction(f"module index {action.module} outside pool of {len(pool)}")
    if len(action.reads) != state.heads.reads or len(action.writes) != state.heads.writes:
        raise IllegalAction("head count does not match the machine's head configuration")
    for p in action.heads:
        if not 0 <= p < L:
            raise IllegalAction(f"head position {p} outside tape of length {L}")


def apply_action(state: MachineState, action: Action, pool: Sequence[ModuleSpec]) -> MachineState:
    check_action(state, action, pool)
    tape = state.tape
    spec = pool[action.module]
    outputs = spec(*(tape[p] for p in action.reads))
    new = list(tape)
    # head order j=1..W, so the last write to a shared cell wins
    for p, tok in zip(action.writes, outputs):
        new[p] = tok
    return MachineState(
        tape=tuple(new),
        landmarks=state.landmarks,
        heads=state.heads,
        prev_module=action.module,
        prev_reads=tuple(action.reads),
        prev_writes=tuple(action.writes),
        step=state.step + 1,
        task=state.task,
    )


def check_halt(state: MachineState, instance: TaskInstance) -> bool:
    tape = state.tape
    return all(tape[p] == e for p, e in zip(instance.target_positions, instance.expected))


def render_trace(state: MachineState) -> str:
    """Three-line rendering: header, tape, head markers (plus a landmark line).

    Head markers: ``r`` read, ``w`` write, ``b`` both.  Landmarks get ``^``.
    """
    L = len(state.tape)
    marks = [" "] * L
    for p in state.prev_reads or ():
        marks[p] = "r"
    for p in state.prev_writes or ():
        marks[p] = "b" if marks[p] == "r" else "w"
    lm = [" "] * L
    for p in state.landmarks:
        lm[p] = "^"
    lines = [
        f"task={state.task or '?'} L={L} t={state.step}",
        tape_to_str(state.tape),
        "".join(marks).rstrip(),
        "".join(lm).rstrip(),
    ]
    return "\n".join(lines)
