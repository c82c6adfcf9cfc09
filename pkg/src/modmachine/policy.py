"""The controller network.

Channel matrix -> two width-3 convolutions -> sequence-to-fixed encoder
(learned-query attention or a BiLSTM) -> feed-forward trunk fed with the
fixed-size context -> module logits, a value estimate, and one query per
tape head.  Head logits are dot products of each query with the per-position
conv features, so nothing in the parameter set depends on the tape length.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .context import AblationFlags, ContextShape
from .machine import Action


class EncoderKind(str, enum.Enum):
    ATTENTION = "attention"
    RECURRENT = "recurrent"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class PolicyDims:
    channels: int
    xi_width: int
    num_modules: int
    reads: int = 2
    writes: int = 1
    conv: int = 64
    queries: int = 8
    trunk: int = 128
    lstm: int = 64

    @classmethod
    def for_context(cls, shape: ContextShape, **sizes) -> "PolicyDims":
        return cls(channels=shape.channels, xi_width=shape.xi_width, num_modules=shape.num_modules,
                   reads=shape.reads, writes=shape.writes, **sizes)

    @property
    def num_heads(self) -> int:
        return self.reads + self.writes

    def embedding_width(self, encoder: EncoderKind) -> int:
        if EncoderKind(encoder) is EncoderKind.ATTENTION:
            return self.queries * self.conv
        return 2 * self.lstm


class PolicyParams:
    """Network weights plus the context settings they were trained against."""

    def __init__(self, dims: PolicyDims, encoder: EncoderKind, store: ParamStore,
                 flags: AblationFlags = AblationFlags()):
        self.dims = dims
        self.encoder = EncoderKind(encoder)
        self.store = store
        self.flags = flags

    def __getitem__(self, name: str) -> Tensor:
        return self.store[name]

    def count(self) -> int:
        return self.store.count()

    def snapshot(self) -> "PolicyParams":
        """Frozen copy for actors: no gradient tracking, no aliasing with the learner."""
        return PolicyParams(self.dims, self.encoder, self.store.copy(requires_grad=False), self.flags)

    def trainable(self) -> "PolicyParams":
        return PolicyParams(self.dims, self.encoder, self.store.copy(requires_grad=True), self.flags)

    def astype(self, dtype) -> "PolicyParams":
        store = ParamStore({k: Tensor(t.data.astype(dtype), t.requires_grad) for k, t in self.store.items()})
        return PolicyParams(self.dims, self.encoder, store, self.flags)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(dims: PolicyDims, encoder: EncoderKind, rng: np.random.Generator,
                flags: AblationFlags = AblationFlags(), requires_grad: bool = True) -> PolicyParams:
    encoder = EncoderKind(encoder)
    shapes: dict[str, tuple[tuple[int, ...], int]] = {
        "conv1.w": ((dims.conv, dims.channels, 3), dims.channels * 3),
        "conv2.w": ((dims.conv, dims.conv, 3), dims.conv * 3),
    }
    if encoder is EncoderKind.ATTENTION:
        shapes["enc.queries"] = ((dims.queries, dims.conv), dims.conv)
    else:
        for d in ("fwd", "bwd"):
            shapes[f"enc.{d}.wx"] = ((dims.conv, 4 * dims.lstm), dims.conv)
            shapes[f"enc.{d}.wh"] = ((dims.lstm, 4 * dims.lstm), dims.lstm)
    trunk_in = dims.embedding_width(encoder) + dims.xi_width
    shapes["trunk1.w"] = ((trunk_in, dims.trunk), trunk_in)
    shapes["trunk2.w"] = ((dims.trunk, dims.trunk), dims.trunk)
    shapes["module.w"] = ((dims.trunk, dims.num_modules), dims.trunk)
    shapes["value.w"] = ((dims.trunk, 1), dims.trunk)
    shapes["heads.w"] = ((dims.trunk, dims.num_heads * dims.conv), dims.trunk)

    store = ParamStore()
    for name, (shape, fan_in) in shapes.items():
        store[name] = Tensor(_uniform(rng, shape, fan_in), requires_grad=requires_grad)
        if name.endswith(".w") or name.endswith(".wx"):
            bias = name.rsplit(".", 1)[0] + ".b"
            width = shape[0] if name.startswith("conv") else shape[-1]
            store[bias] = Tensor(np.zeros(width), requires_grad=requires_grad)
    return PolicyParams(dims, encoder, store, flags)


@dataclass
class PolicyOutput:
    module_logits: Tensor  # (..., k)
    head_logits: Tensor    # (..., R+W, L)
    value: Tensor          # (...)
    reads: int = 2

    @property
    def length(self) -> int:
        return self.head_logits.shape[-1]


def forward_batch(params: PolicyParams, xi, sigma) -> PolicyOutput:
    """Batched forward: ``xi`` (N, X), ``sigma`` (N, C, L) -> batched outputs."""
    p, dims = params.store, params.dims
    xi, sigma = ad.as_tensor(xi), ad.as_tensor(sigma)
    if sigma.ndim != 3 or sigma.shape[1] != dims.channels:
        raise ValueError(f"expected channel matrix with {dims.channels} channels, got shape {sigma.shape}")
    if xi.shape[-1] != dims.xi_width:
        raise ValueError(f"expected context width {dims.xi_width}, got {xi.shape[-1]}")
    N = sigma.shape[0]
    feats = ad.relu(ad.conv1d(sigma, p["conv1.w"], p["conv1.b"]))
    feats = ad.relu(ad.conv1d(feats, p["conv2.w"], p["conv2.b"]))  # (N, D, L)
    cols = ad.swap_last(feats)  # (N, L, D)
    if params.encoder is EncoderKind.ATTENTION:
        emb, _ = ad.softmax_attention(p["enc.queries"], cols, cols)  # (N, nq, D)
        emb = ad.reshape(emb, (N, dims.queries * dims.conv))
    else:
        emb = ad.bilstm(feats,
                        (p["enc.fwd.wx"], p["enc.fwd.wh"], p["enc.fwd.b"]),
                        (p["enc.bwd.wx"], p["enc.bwd.wh"], p["enc.bwd.b"]))
    h = ad.concat([emb, xi], axis=-1)
    h = ad.relu(ad.dense(h, p["trunk1.w"], p["trunk1.b"]))
    h = ad.relu(ad.dense(h, p["trunk2.w"], p["trunk2.b"]))
    module_logits = ad.dense(h, p["module.w"], p["module.b"])
    value = ad.reshape(ad.dense(h, p["value.w"], p["value.b"]), (N,))
    queries = ad.reshape(ad.dense(h, p["heads.w"], p["heads.b"]), (N, dims.num_heads, dims.conv))
    head_logits = ad.mul(ad.matmul(queries, feats), 1.0 / math.sqrt(dims.conv))  # (N, H, L)
    return PolicyOutput(module_logits, head_logits, value, reads=dims.reads)


def forward(params: PolicyParams, xi, sigma) -> PolicyOutput:
    """Single-context forward: ``xi`` (X,), ``sigma`` (C, L)."""
    xi = np.asarray(xi.data if isinstance(xi, Tensor) else xi)
    sigma = np.asarray(sigma.data if isinstance(sigma, Tensor) else sigma)
    if sigma.ndim != 2:
        raise ValueError(f"expected a (channels, L) matrix, got shape {sigma.shape}")
    out = forward_batch(params, xi[None], sigma[None])
    return PolicyOutput(out.module_logits[0], out.head_logits[0], out.value[0], reads=out.reads)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _sample_index(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling along the last axis; ``u`` has the leading shape."""
    cdf = np.cumsum(np.exp(logp), axis=-1)
    idx = (cdf < (u * cdf[..., -1])[..., None]).sum(axis=-1)
    return np.minimum(idx, logp.shape[-1] - 1)


def sample_action(out: PolicyOutput, rng: np.random.Generator, greedy: bool = False) -> tuple[Action, float]:
    """Sample module and every head independently; logprob is the sum of the parts."""
    action, logprob, _ = sample_with_entropy(out, rng, greedy)
    return action, logprob


def sample_with_entropy(out: PolicyOutput, rng: np.random.Generator,
                        greedy: bool = False) -> tuple[Action, float, float]:
    m_logp = _log_softmax_np(out.module_logits.data.astype(np.float64))
    h_logp = _log_softmax_np(out.head_logits.data.astype(np.float64))
    if greedy:
        m = int(np.argmax(m_logp))
        heads = np.argmax(h_logp, axis=-1)
    else:
        u = rng.random(1 + h_logp.shape[0])
        m = int(_sample_index(m_logp, u[:1])[0])
        heads = _sample_index(h_logp, u[1:])
    logprob = float(m_logp[m] + h_logp[np.arange(len(heads)), heads].sum())
    ent = -float(np.sum(np.exp(m_logp) * m_logp) + np.sum(np.exp(h_logp) * h_logp))
    heads = [int(x) for x in heads]
    return Action(m, tuple(heads[:out.reads]), tuple(heads[out.reads:])), logprob, ent


def sample_batch(out: PolicyOutput, rng: np.random.Generator,
                 greedy: bool = False) -> list[tuple[Action, float, float]]:
    """Row-wise ``sample_with_entropy`` for batched outputs (N, k) / (N, H, L)."""
    m_logp = _log_softmax_np(out.module_logits.data.astype(np.float64))
    h_logp = _log_softmax_np(out.head_logits.data.astype(np.float64))
    N, H = h_logp.shape[:2]
    if greedy:
        mods = np.argmax(m_logp, axis=-1)
        heads = np.argmax(h_logp, axis=-1)
    else:
        u = rng.random((N, 1 + H))
        mods = _sample_index(m_logp, u[:, 0])
        heads = _sample_index(h_logp, u[:, 1:])
    rows = np.arange(N)
    logprob = m_logp[rows, mods] + np.take_along_axis(h_logp, heads[..., None], axis=-1)[..., 0].sum(-1)
    ent = -(np.sum(np.exp(m_logp) * m_logp, axis=-1) + np.sum(np.exp(h_logp) * h_logp, axis=(1, 2)))
    R = out.reads
    return [(Action(int(mods[r]), tuple(int(h) for h in heads[r, :R]), tuple(int(h) for h in heads[r, R:])),
             float(logprob[r]), float(ent[r])) for r in range(N)]


def action_logprob(out: PolicyOutput, action: Action) -> Tensor:
    k, L = out.module_logits.shape[-1], out.length
    if not 0 <= action.module < k or any(not 0 <= h < L for h in action.heads):
        raise IndexError(f"action {action} outside the action space (k={k}, L={L})")
    lp_m = ad.categorical_logprob(out.module_logits, action.module)
    lp_h = ad.categorical_logprob(out.head_logits, np.array(action.heads))
    return ad.add(lp_m, ad.reduce_sum(lp_h))


def entropy(out: PolicyOutput) -> Tensor:
    return ad.add(ad.categorical_entropy(out.module_logits),
                  ad.reduce_sum(ad.categorical_entropy(out.head_logits), axis=-1))


def batch_logprob(out: PolicyOutput, modules: np.ndarray, heads: np.ndarray) -> Tensor:
    """Per-row log-probabilities for a batch: modules (N,), heads (N, R+W)."""
    lp_m = ad.categorical_logprob(out.module_logits, modules)
    lp_h = ad.categorical_logprob(out.head_logits, heads)
    return ad.add(lp_m, ad.reduce_sum(lp_h, axis=-1))
