"""Controller input: the fixed-size previous-action vector and the channel matrix.

Channel layout of the matrix, top to bottom:

    |V| token channels | Λ landmark channels | R read-head + W write-head channels

Ablated blocks are zero-filled, never dropped, so one network shape serves
every ablation setting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .machine import MachineState
from .tokens import Vocab


@dataclass(frozen=True)
class AblationFlags:
    no_tape_values: bool = False
    no_action_history: bool = False
    no_history_tape_values: bool = False

    @classmethod
    def from_name(cls, name: str) -> "AblationFlags":
        name = name.replace("-", "_").lower()
        if name in ("", "none", "full"):
            return cls()
        if name not in cls.__dataclass_fields__:
            raise ValueError(f"unknown ablation {name!r}")
        return cls(**{name: True})


@dataclass(frozen=True)
class ContextShape:
    vocab_size: int
    num_landmarks: int
    reads: int
    writes: int
    num_modules: int

    @property
    def channels(self) -> int:
        return self.vocab_size + self.num_landmarks + self.reads + self.writes

    @property
    def xi_width(self) -> int:
        return (self.reads + self.writes) * self.vocab_size + self.num_modules


def encode_sigma(state: MachineState, vocab: Vocab, flags: AblationFlags = AblationFlags(),
                 dtype=np.float64) -> np.ndarray:
    L = len(state.tape)
    V = len(vocab)
    n_lm = len(state.landmarks)
    H = state.heads.total
    sigma = np.zeros((V + n_lm + H, L), dtype=dtype)
    cols = np.arange(L)
    if not flags.no_tape_values:
        rows = [vocab.lookup[t] for t in state.tape]
        if min(rows) < 0:
            raise ValueError("tape holds a token outside the task vocabulary")
        sigma[rows, cols] = 1.0
    sigma[V + np.arange(n_lm), list(state.landmarks)] = 1.0
    if state.prev_module is not None and not flags.no_action_history:
        heads = state.prev_reads + state.prev_writes
        sigma[V + n_lm + np.arange(H), list(heads)] = 1.0
    return sigma


def encode_xi(state: MachineState, vocab: Vocab, num_modules: int,
              flags: AblationFlags = AblationFlags(), dtype=np.float64) -> np.ndarray:
    V = len(vocab)
    H = state.heads.total
    xi = np.zeros(H * V + num_modules, dtype=dtype)
    if state.prev_module is None or flags.no_action_history:
        return xi
    if not flags.no_history_tape_values:
        heads = state.prev_reads + state.prev_writes
        rows = [vocab.lookup[state.tape[p]] for p in heads]
        if min(rows) < 0:
            raise ValueError("tape holds a token outside the task vocabulary")
        xi[np.arange(H) * V + rows] = 1.0
    xi[H * V + state.prev_module] = 1.0
    return xi


def sigma_blocks(shape: ContextShape) -> dict[str, slice]:
    """Row ranges of the three logical blocks of the channel matrix."""
    V, n_lm = shape.vocab_size, shape.num_landmarks
    return {
        "tokens": slice(0, V),
        "landmarks": slice(V, V + n_lm),
        "heads": slice(V + n_lm, shape.channels),
    }
