"""Finite-difference checks for every differentiable op and the training loss."""
from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck, max_rel_error, no_grad, numeric_grad
from .context import AblationFlags
from .policy import EncoderKind, PolicyDims, init_params
from .tasks import TaskInstance, TaskKind, generate
from .tokens import EMPTY

TOLERANCE = {"float64": 1e-6, "float32": 1e-4}


@dataclass
class CheckResult:
    name: str
    dtype: str
    shapes: int
    max_error: float
    min_length: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_error < self.tolerance


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _lengths(count: int, rng) -> list[int]:
    # always include the L=1 edge case
    return [1] + [int(rng.integers(1, 9)) for _ in range(count - 1)]


def _case_conv1d(rng, L):
    C, O = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    batched = bool(rng.integers(2))
    x = _rand(rng, *((2, C, L) if batched else (C, L)))
    return (lambda t: ad.conv1d(t[0], t[1], t[2])), [x, _rand(rng, O, C, 3), _rand(rng, O)]


def _case_attention(rng, L):
    q, d, v = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 5))

    def build(t):
        out, w = ad.softmax_attention(t[0], t[1], t[2])
        return ad.concat([ad.reshape(out, (-1,)), ad.reshape(w, (-1,))])

    return build, [_rand(rng, q, d), _rand(rng, L, d), _rand(rng, L, v)]


def _case_dense(rng, L):
    i, o = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    return (lambda t: ad.dense(t[0], t[1], t[2])), [_rand(rng, L, i), _rand(rng, i, o), _rand(rng, o)]


def _case_matmul(rng, L):
    a, b = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    return (lambda t: ad.matmul(t[0], t[1])), [_rand(rng, 2, a, L), _rand(rng, L, b)]


def _case_relu(rng, L):
    x = _rand(rng, 3, L)
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    return (lambda t: ad.relu(t[0])), [x]


def _case_sigmoid_tanh(rng, L):
    return (lambda t: ad.mul(ad.sigmoid(t[0]), ad.tanh(t[0]))), [_rand(rng, 2, L)]


def _case_row_softmax(rng, L):
    return (lambda t: ad.row_softmax(t[0])), [_rand(rng, 3, L)]


def _case_log_softmax(rng, L):
    return (lambda t: ad.log_softmax(t[0])), [_rand(rng, 3, L)]


def _case_logprob(rng, L):
    n = 3
    idx = rng.integers(0, L, size=n)
    return (lambda t: ad.categorical_logprob(t[0], idx)), [_rand(rng, n, L)]


def _case_entropy(rng, L):
    return (lambda t: ad.categorical_entropy(t[0])), [_rand(rng, 2, L)]


def _case_bilstm(rng, L):
    C, H = int(rng.integers(1, 4)), int(rng.integers(1, 4))

    def build(t):
        return ad.bilstm(t[0], (t[1], t[2], t[3]), (t[4], t[5], t[6]))

    arrays = [_rand(rng, C, L)]
    for _ in range(2):
        arrays += [0.5 * _rand(rng, C, 4 * H), 0.5 * _rand(rng, H, 4 * H), 0.5 * _rand(rng, 4 * H)]
    return build, arrays


OP_CASES: dict[str, Callable] = {
    "conv1d": _case_conv1d,
    "softmax_attention": _case_attention,
    "dense": _case_dense,
    "matmul": _case_matmul,
    "relu": _case_relu,
    "sigmoid_tanh": _case_sigmoid_tanh,
    "row_softmax": _case_row_softmax,
    "log_softmax": _case_log_softmax,
    "categorical_logprob": _case_logprob,
    "categorical_entropy": _case_entropy,
    "bilstm": _case_bilstm,
}


def check_op(name: str, shapes: int = 20, dtype: str = "float64", seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, sorted(OP_CASES).index(name)])
    worst = 0.0
    lengths = _lengths(shapes, rng)
    for i, L in enumerate(lengths):
        build, arrays = OP_CASES[name](rng, L)
        worst = max(worst, gradcheck(build, arrays, dtype=np.dtype(dtype), eps=1e-6, seed=i))
    return CheckResult(name, dtype, shapes, worst, min(lengths), TOLERANCE[dtype])


# -- training loss ---------------------------------------------------------------

def _tiny_instance() -> TaskInstance:
    """A one-cell copy-layout tape: exercises L=1 through the whole loss."""
    return TaskInstance(TaskKind.COPY, (EMPTY,), (0, 0), (0,), (5,), 1)


def frozen_batch(seed: int, encoder: EncoderKind = EncoderKind.ATTENTION, length_one: bool = False,
                 flags: AblationFlags = AblationFlags()):
    """Two episodes from a small random policy, plus the config and parameters."""
    from .trainer import TrainConfig, context_shape, run_episode

    rng = np.random.default_rng(seed)
    config = TrainConfig(task="copy", encoder=str(encoder), t_max_factor=2.0, reward="dense",
                         entropy_weight=0.05, gamma=0.9)
    dims = PolicyDims.for_context(context_shape("copy"), conv=3, queries=2, trunk=5, lstm=2)
    params = init_params(dims, encoder, rng, flags=flags)
    # zero biases put dead ReLU units exactly on the kink; check at a generic point
    for name, t in params.store.items():
        if name.endswith(".b"):
            t.data[...] = rng.uniform(-0.3, 0.3, size=t.shape)
    instances = [_tiny_instance() if length_one else generate("copy", int(rng.integers(1, 3)), rng),
                 generate("copy", int(rng.integers(1, 3)), rng)]
    traces = []
    for inst in instances:
        tr = run_episode(params, inst, config, rng)
        if tr.length == 0:
            raise RuntimeError("frozen batch needs non-empty episodes")
        traces.append(tr)
    return params, traces, config


@functools.lru_cache(maxsize=64)
def _loss_case(seed: int, encoder: EncoderKind, length_one: bool):
    """Frozen batch, pinned baselines and the float64 finite-difference gradient."""
    from .trainer import pg_loss

    params, traces, config = frozen_batch(seed, encoder, length_one=length_one)
    with no_grad():
        baselines: dict = {}
        pg_loss(params, traces, config, baselines)
    ref = {k: t.data.copy() for k, t in params.store.items()}
    probe = params.snapshot()
    for k in ref:
        probe.store[k] = Tensor(ref[k])

    def f():
        with no_grad():
            return float(pg_loss(probe, traces, config, baselines)[0].data)

    numeric = np.concatenate([numeric_grad(f, arr, eps=1e-6).ravel() for arr in ref.values()])
    return params, traces, config, baselines, numeric


def check_loss(shapes: int = 20, dtype: str = "float64", seed: int = 0,
               encoder: EncoderKind = EncoderKind.ATTENTION) -> CheckResult:
    """Analytic loss gradient at ``dtype`` against float64 central differences.

    The baseline is held fixed at its value on the frozen batch, matching the
    stop-gradient the update applies to the advantage.
    """
    from .trainer import pg_loss

    encoder = EncoderKind(encoder)
    worst = 0.0
    for i in range(shapes):
        params, traces, config, baselines, numeric = _loss_case(seed * 1000 + i, encoder, i == 0)
        config = dataclasses.replace(config, dtype=dtype)
        trainable = params.astype(np.dtype(dtype))
        for t in trainable.store.values():
            t.requires_grad = True
        pinned = {L: b.astype(dtype) for L, b in baselines.items()}
        loss, _ = pg_loss(trainable, traces, config, pinned)
        loss.backward()
        # the loss gradient is one vector over all parameters
        analytic = np.concatenate([
            np.zeros(t.data.size) if t.grad is None else t.grad.astype(np.float64).ravel()
            for t in trainable.store.values()])
        worst = max(worst, max_rel_error(analytic, numeric))
    return CheckResult(f"pg_loss[{encoder}]", dtype, shapes, worst, 1, TOLERANCE[dtype])


def run_suite(shapes: int = 20, dtypes=("float64", "float32"), seed: int = 0,
              include_loss: bool = True) -> list[CheckResult]:
    results = []
    for dtype in dtypes:
        for name in OP_CASES:
            results.append(check_op(name, shapes, dtype, seed))
        if include_loss:
            for enc in EncoderKind:
                results.append(check_loss(shapes, dtype, seed, enc))
    return results


def format_table(results: list[CheckResult]) -> str:
    rows = [f"{'check':<26}{'dtype':>8}{'shapes':>7}{'min L':>6}{'max rel err':>13}{'tol':>8}  ok"]
    for r in results:
        rows.append(f"{r.name:<26}{r.dtype:>8}{r.shapes:>7}{r.min_length:>6}{r.max_error:>13.2e}"
                    f"{r.tolerance:>8.0e}  {'yes' if r.ok else 'NO'}")
    return "\n".join(rows)
