"""Task generators, expected-output oracles and the curriculum schedule."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tokens import EMPTY, PLUS, SEP, STAR, Vocab, parse_tape, tape_to_str


class TaskKind(str, enum.Enum):
    COPY = "copy"
    REVERSE = "reverse"
    INCREMENT = "increment"
    FILTER_EVEN = "filter_even"
    ADD = "add"

    def __str__(self) -> str:
        return self.value


COPY_FAMILY = (TaskKind.COPY, TaskKind.REVERSE, TaskKind.INCREMENT, TaskKind.FILTER_EVEN)


def task_base(kind) -> int:
    return 16 if TaskKind(kind) is TaskKind.FILTER_EVEN else 10


def task_vocab(kind) -> Vocab:
    kind = TaskKind(kind)
    if kind is TaskKind.ADD:
        return Vocab(10, (EMPTY, SEP, PLUS, STAR))
    return Vocab(task_base(kind), (EMPTY, SEP))


def num_landmark_channels(kind) -> int:
    """SOT + task landmarks + EOT."""
    return 5 if TaskKind(kind) is TaskKind.ADD else 4


@dataclass(frozen=True)
class TaskInstance:
    kind: TaskKind
    initial_tape: tuple[int, ...]
    landmarks: tuple[int, ...]
    target_positions: tuple[int, ...]
    expected: tuple[int, ...]
    difficulty: int

    @property
    def length(self) -> int:
        return len(self.initial_tape)

    @property
    def input_digits(self) -> tuple[int, ...]:
        """Input digits in tape order (for addition: a's digits then b's)."""
        n = self.difficulty
        tape = self.initial_tape
        if self.kind is TaskKind.ADD:
            return tape[1:n + 1] + tape[n + 2:2 * n + 2]
        return tape[:n]

    def __str__(self) -> str:
        return f"{self.kind}(n={self.difficulty}) {tape_to_str(self.initial_tape)}"


def expected_output(kind, digits: Sequence[int]) -> tuple[int, ...]:
    """Ground-truth target contents for the given input digits.

    For addition ``digits`` holds both operands back to back (equal length,
    most significant digit first).
    """
    kind = TaskKind(kind)
    digits = tuple(digits)
    if kind is TaskKind.COPY:
        return digits
    if kind is TaskKind.REVERSE:
        return digits[::-1]
    if kind is TaskKind.INCREMENT:
        return tuple((d + 1) % 10 for d in digits)
    if kind is TaskKind.FILTER_EVEN:
        evens = tuple(d for d in digits if d % 2 == 0)
        return evens + (EMPTY,) * (len(digits) - len(evens))
    if len(digits) % 2:
        raise ValueError("addition needs two operands of equal length")
    n = len(digits) // 2
    a = int("".join(map(str, digits[:n])))
    b = int("".join(map(str, digits[n:])))
    return tuple(int(c) for c in str(a + b).zfill(n + 1))


def make_instance(kind, digits: Sequence[int]) -> TaskInstance:
    """Lay out the tape for the given input digits."""
    kind = TaskKind(kind)
    digits = tuple(int(d) for d in digits)
    base = task_base(kind)
    if any(not 0 <= d < base for d in digits):
        raise ValueError(f"digit out of range for base {base}: {digits}")
    if kind is TaskKind.ADD:
        if len(digits) < 2 or len(digits) % 2:
            raise ValueError("addition needs two non-empty operands of equal length")
        n = len(digits) // 2
        tape = (STAR,) + digits[:n] + (PLUS,) + digits[n:] + (SEP,) + (EMPTY,) * (n + 1)
        landmarks = (0, n + 1, 2 * n + 2)
        targets = tuple(range(2 * n + 3, 3 * n + 4))
    else:
        n = len(digits)
        if n < 1:
            raise ValueError("difficulty must be >= 1")
        tape = digits + (SEP,) + (EMPTY,) * n
        landmarks = (0, n)
        targets = tuple(range(n + 1, 2 * n + 1))
    return TaskInstance(
        kind=kind,
        initial_tape=tape,
        landmarks=landmarks,
        target_positions=targets,
        expected=expected_output(kind, digits),
        difficulty=n,
    )


def generate(kind, difficulty: int, rng: np.random.Generator) -> TaskInstance:
    kind = TaskKind(kind)
    if difficulty < 1:
        raise ValueError(f"difficulty must be >= 1, got {difficulty}")
    count = 2 * difficulty if kind is TaskKind.ADD else difficulty
    digits = rng.integers(0, task_base(kind), size=count)
    return make_instance(kind, digits.tolist())


def success(tape: Sequence[int], instance: TaskInstance) -> bool:
    """Only the target cells are scored."""
    return all(tape[p] == e for p, e in zip(instance.target_positions, instance.expected))


def fraction_correct(tape: Sequence[int], instance: TaskInstance) -> float:
    hits = sum(tape[p] == e for p, e in zip(instance.target_positions, instance.expected))
    return hits / len(instance.target_positions)


@dataclass(frozen=True)
class CurriculumSchedule:
    c_min: int = 2
    c_max: int = 10
    ramp_start: int = 1_000_000
    ramp_end: int = 18_000_000

    def __post_init__(self):
        if not 1 <= self.c_min <= self.c_max:
            raise ValueError("need 1 <= c_min <= c_max")
        if self.ramp_end <= self.ramp_start:
            raise ValueError("ramp_end must exceed ramp_start")


def curriculum_level(step: int, sched: CurriculumSchedule = CurriculumSchedule()) -> int:
    if step < 0:
        raise ValueError("step must be non-negative")
    frac = (step - sched.ramp_start) / (sched.ramp_end - sched.ramp_start)
    c = sched.c_min + math.floor((sched.c_max - sched.c_min) * frac)
    return min(max(c, sched.c_min), sched.c_max)


def sample_difficulty(c: int, rng: np.random.Generator) -> int:
    if c < 1:
        raise ValueError("curriculum level must be >= 1")
    return int(rng.integers(1, c + 1))


# -- eval-set file format ---------------------------------------------------

EVALSET_HEADER = "# modmachine-evalset v1"


def format_instance_line(instance: TaskInstance, seed: int) -> str:
    return f"{instance.kind.value};{instance.difficulty};{tape_to_str(instance.input_digits)};{seed}"


def parse_instance_line(line: str) -> tuple[TaskInstance, int]:
    """Rebuild an instance; the expected output is recomputed, never read."""
    try:
        kind, n, digits, seed = line.strip().split(";")
        instance = make_instance(TaskKind(kind), parse_tape(digits))
        n = int(n)
    except ValueError as exc:
        raise ValueError(f"bad eval-set line {line!r}: {exc}") from None
    if instance.difficulty != n:
        raise ValueError(f"bad eval-set line {line!r}: length field {n} disagrees with digits")
    return instance, int(seed)
