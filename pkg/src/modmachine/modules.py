"""The fixed computational modules and the per-task module pools.

Every module reads two tokens and emits one.  Modules that naturally take a
single argument ignore the second one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .tokens import EMPTY, PLUS, SEP, STAR, is_digit

MODULE_NAMES = ("Reset", "Identity", "Increment", "Max", "Sum", "SumInc")

# Empty < '$' < '+' < '*' < every digit
_RANK = {EMPTY: 0, SEP: 1, PLUS: 2, STAR: 3}


def token_rank(tok: int) -> int:
    return _RANK.get(tok, 4 + tok)


def _reset(x: int, y: int, base: int) -> int:
    return EMPTY


def _identity(x: int, y: int, base: int) -> int:
    return x


def _increment(x: int, y: int, base: int) -> int:
    if not is_digit(x, base):
        return EMPTY
    return (x + 1) % base


def _max(x: int, y: int, base: int) -> int:
    return x if token_rank(x) >= token_rank(y) else y


def _sum(x: int, y: int, base: int) -> int:
    if is_digit(x, base) and is_digit(y, base):
        return (x + y) % base
    return 0


def _suminc(x: int, y: int, base: int) -> int:
    if is_digit(x, base) and is_digit(y, base):
        return (x + y + 1) % base
    return 0


MODULE_FUNCS: dict[str, Callable[[int, int, int], int]] = {
    "Reset": _reset,
    "Identity": _identity,
    "Increment": _increment,
    "Max": _max,
    "Sum": _sum,
    "SumInc": _suminc,
}


@dataclass(frozen=True)
class ModuleSpec:
    name: str
    base: int = 10
    arity_in: int = 2
    arity_out: int = 1

    def __post_init__(self):
        if self.name not in MODULE_FUNCS:
            raise ValueError(f"unknown module {self.name!r}")

    def __call__(self, *args: int) -> tuple[int, ...]:
        """Apply to ``arity_in`` tokens, returning ``arity_out`` tokens."""
        return (eval_module(self, args[0], args[1]),)


def eval_module(spec: ModuleSpec, x: int, y: int) -> int:
    # looked up at call time so tests can patch MODULE_FUNCS
    return MODULE_FUNCS[spec.name](x, y, spec.base)


_COPY_FAMILY_POOL = ("Reset", "Identity", "Increment", "Max", "Sum")
_ADD_POOL = ("Sum", "SumInc")


def pool_for_task(kind) -> tuple[ModuleSpec, ...]:
    """Ordered module pool for a task; the order is the module action space."""
    from .tasks import TaskKind, task_base

    kind = TaskKind(kind)
    names = _ADD_POOL if kind is TaskKind.ADD else _COPY_FAMILY_POOL
    base = task_base(kind)
    return tuple(ModuleSpec(n, base) for n in names)
