"""Episode rollout, REINFORCE-with-baseline updates and the actor/learner loop."""
from __future__ import annotations

import collections
import dataclasses
import json
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, DiagnosticsError
from .checkpoint import save_checkpoint
from .context import AblationFlags, ContextShape, encode_sigma, encode_xi
from .machine import MachineState, apply_action, check_halt, init_machine
from .modules import pool_for_task
from .policy import (EncoderKind, PolicyDims, PolicyParams, batch_logprob, entropy as policy_entropy,
                     forward_batch, init_params, sample_batch)
from .tasks import (CurriculumSchedule, TaskInstance, TaskKind, curriculum_level, fraction_correct, generate,
                    num_landmark_channels, sample_difficulty, task_vocab)

log = logging.getLogger(__name__)

REWARD_SCHEMES = ("sparse", "dense")


@dataclass
class TrainConfig:
    task: str = "copy"
    encoder: str = "attention"
    ablation: AblationFlags = field(default_factory=AblationFlags)
    t_max_factor: float = 8.0
    reward: str = "sparse"
    step_cost: float = 0.01
    gamma: float = 0.99
    entropy_weight: float = 0.01
    value_weight: float = 0.5
    learning_rate: float = 1e-3
    max_grad_norm: Optional[float] = None
    batch_size: int = 32
    actors: int = 1
    sync: bool = True
    queue_capacity: int = 256
    total_steps: int = 30_000_000
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    seed: int = 0
    conv: int = 64
    queries: int = 8
    trunk: int = 128
    lstm: int = 64
    dtype: str = "float64"
    log_path: Optional[str] = None
    log_every: int = 1
    checkpoint_dir: Optional[str] = None
    checkpoint_interval: int = 1_000_000
    eval_interval: int = 50_000
    eval_length: Optional[int] = None
    eval_seed: int = 1234
    eval_greedy: bool = False
    stop_at_rate: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)
        if isinstance(self.curriculum, dict):
            self.curriculum = CurriculumSchedule(**self.curriculum)
        self.task = TaskKind(self.task).value
        self.encoder = EncoderKind(self.encoder).value
        if self.reward not in REWARD_SCHEMES:
            raise ValueError(f"unknown reward scheme {self.reward!r}")
        for name in ("t_max_factor", "learning_rate", "batch_size", "actors", "queue_capacity", "total_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def kind(self) -> TaskKind:
        return TaskKind(self.task)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def context_shape(kind, heads_r: int = 2, heads_w: int = 1) -> ContextShape:
    kind = TaskKind(kind)
    return ContextShape(len(task_vocab(kind)), num_landmark_channels(kind), heads_r, heads_w,
                        len(pool_for_task(kind)))


def policy_dims(config: TrainConfig) -> PolicyDims:
    return PolicyDims.for_context(context_shape(config.kind), conv=config.conv, queries=config.queries,
                                  trunk=config.trunk, lstm=config.lstm)


def t_max(length: int, factor: float) -> int:
    return max(1, math.ceil(factor * length))


# -- rollout ----------------------------------------------------------------------

@dataclass
class Step:
    xi: np.ndarray
    sigma: np.ndarray
    module: int
    heads: tuple[int, ...]
    logprob: float
    entropy: float
    value: float


@dataclass
class EpisodeTrace:
    instance: TaskInstance
    steps: list[Step]
    success: bool
    final_tape: tuple[int, ...]
    version: int = 0

    @property
    def length(self) -> int:
        return len(self.steps)


@dataclass
class _TaskEnv:
    pool: tuple
    vocab: Any

    @classmethod
    def for_kind(cls, kind) -> "_TaskEnv":
        return cls(pool_for_task(kind), task_vocab(kind))


_ENVS: dict[TaskKind, _TaskEnv] = {}


def _env(kind: TaskKind) -> _TaskEnv:
    if kind not in _ENVS:
        _ENVS[kind] = _TaskEnv.for_kind(kind)
    return _ENVS[kind]


def run_episode(params: PolicyParams, instance: TaskInstance, config: TrainConfig,
                rng: np.random.Generator, greedy: bool = False,
                on_step: Optional[Callable[[MachineState], None]] = None) -> EpisodeTrace:
    """Roll the policy out until the halting check fires or the step cap is hit."""
    hook = None if on_step is None else (lambda _, state: on_step(state))
    return run_episodes(params, [instance], config, rng, greedy, hook)[0]


def run_episodes(params: PolicyParams, instances: Sequence[TaskInstance], config: TrainConfig,
                 rng: np.random.Generator, greedy: bool = False,
                 on_step: Optional[Callable[[int, MachineState], None]] = None) -> list[EpisodeTrace]:
    """Roll out several episodes in lockstep.

    Live episodes that share a tape length go through one batched forward
    pass per tick; each episode still ends on its own halting check or cap.
    """
    flags = params.flags
    dtype = config.np_dtype
    envs = [_env(inst.kind) for inst in instances]
    states = [init_machine(inst) for inst in instances]
    steps: list[list[Step]] = [[] for _ in instances]
    caps = [t_max(inst.length, config.t_max_factor) for inst in instances]
    live = [i for i, inst in enumerate(instances) if not check_halt(states[i], inst)]
    done = {i: True for i in range(len(instances)) if i not in live}
    with ad.no_grad():
        while live:
            groups: dict[tuple, list[int]] = collections.defaultdict(list)
            for i in live:
                groups[(instances[i].kind, instances[i].length)].append(i)
            for (kind, _), idx in groups.items():
                env = envs[idx[0]]
                k = len(env.pool)
                xi = np.stack([encode_xi(states[i], env.vocab, k, flags, dtype=dtype) for i in idx])
                sigma = np.stack([encode_sigma(states[i], env.vocab, flags, dtype=dtype) for i in idx])
                out = forward_batch(params, xi, sigma)
                actions = sample_batch(out, rng, greedy)
                for row, i in enumerate(idx):
                    action, logprob, ent = actions[row]
                    steps[i].append(Step(xi[row], sigma[row], action.module, action.heads, logprob, ent,
                                         float(out.value.data[row])))
                    states[i] = apply_action(states[i], action, env.pool)
                    if on_step is not None:
                        on_step(i, states[i])
            still = []
            for i in live:
                if check_halt(states[i], instances[i]):
                    done[i] = True
                elif len(steps[i]) >= caps[i]:
                    done[i] = False
                else:
                    still.append(i)
            live = still
    return [EpisodeTrace(inst, steps[i], done[i], states[i].tape) for i, inst in enumerate(instances)]


def episode_reward(trace: EpisodeTrace, scheme: str = "sparse", step_cost: float = 0.01) -> np.ndarray:
    """Per-step rewards: a constant step cost plus a terminal reward on the last step.

    sparse: terminal 1.0 on success, else 0.0.  dense: terminal is the
    fraction of target cells holding the right token.
    """
    if scheme not in REWARD_SCHEMES:
        raise ValueError(f"unknown reward scheme {scheme!r}")
    rewards = np.full(trace.length, -step_cost)
    if trace.length:
        if scheme == "sparse":
            rewards[-1] += 1.0 if trace.success else 0.0
        else:
            rewards[-1] += fraction_correct(trace.final_tape, trace.instance)
    return rewards


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


# -- learner ----------------------------------------------------------------------

@dataclass
class UpdateStats:
    episodes: int
    steps: int
    mean_return: float
    success_rate: float
    pg_loss: float
    value_loss: float
    entropy: float
    loss: float
    grad_norm: float = 0.0


def pg_loss(params: PolicyParams, traces: Sequence[EpisodeTrace], config: TrainConfig,
            baselines: Optional[dict[int, np.ndarray]] = None):
    """Build the REINFORCE-with-baseline loss over a batch.

    Steps are grouped by tape length so each group runs as one batched
    forward pass.  The advantage is a constant for differentiation.  Passing
    a dict as ``baselines`` pins the baseline per tape length; groups missing
    from it are filled in with the value head's output.  Returns (loss, stats).
    """
    groups: dict[int, list[tuple[Step, float]]] = collections.defaultdict(list)
    ep_returns = []
    for tr in traces:
        rewards = episode_reward(tr, config.reward, config.step_cost)
        ep_returns.append(float(rewards.sum()))
        for step, g in zip(tr.steps, discounted_returns(rewards, config.gamma)):
            groups[step.sigma.shape[-1]].append((step, g))

    total = None
    pg_sum = v_sum = ent_sum = 0.0
    n_steps = 0
    dtype = config.np_dtype
    for L in sorted(groups):
        items = groups[L]
        xi = np.stack([s.xi for s, _ in items]).astype(dtype, copy=False)
        sigma = np.stack([s.sigma for s, _ in items]).astype(dtype, copy=False)
        modules = np.array([s.module for s, _ in items])
        heads = np.array([s.heads for s, _ in items])
        returns = np.array([g for _, g in items], dtype=dtype)
        out = forward_batch(params, xi, sigma)
        logp = batch_logprob(out, modules, heads)
        ent = policy_entropy(out)
        if baselines is not None:
            baseline = baselines.setdefault(L, out.value.data.copy())
        else:
            baseline = out.value.data
        advantage = returns - baseline
        pg = ad.mul(ad.reduce_sum(ad.mul(logp, advantage)), -1.0)
        vl = ad.mul(ad.reduce_sum(ad.square(ad.sub(returns, out.value))), config.value_weight)
        eh = ad.mul(ad.reduce_sum(ent), -config.entropy_weight)
        part = ad.add(ad.add(pg, vl), eh)
        total = part if total is None else ad.add(total, part)
        pg_sum += float(pg.data)
        v_sum += float(vl.data)
        ent_sum += float(ent.data.sum())
        n_steps += len(items)

    if total is None:
        total = ad.Tensor(np.zeros((), dtype=dtype))
    stats = UpdateStats(
        episodes=len(traces),
        steps=n_steps,
        mean_return=float(np.mean(ep_returns)) if ep_returns else 0.0,
        success_rate=float(np.mean([t.success for t in traces])) if traces else 0.0,
        pg_loss=pg_sum,
        value_loss=v_sum,
        entropy=ent_sum / n_steps if n_steps else 0.0,
        loss=float(total.data),
    )
    return total, stats


def policy_gradient_update(params: PolicyParams, traces: Sequence[EpisodeTrace], config: TrainConfig,
                           optimizer: Adam) -> UpdateStats:
    """One optimizer step on the batch; the update is skipped on a non-finite loss."""
    if not traces:
        raise ValueError("empty batch")
    params.store.zero_grad()
    loss, stats = pg_loss(params, traces, config)
    if not math.isfinite(stats.loss):
        params.store.zero_grad()
        raise DiagnosticsError(f"non-finite loss {stats.loss}; update skipped")
    if loss.requires_grad:
        loss.backward()
    stats.grad_norm = optimizer.grad_norm()  # before clipping
    try:
        optimizer.step()
    except DiagnosticsError:
        params.store.zero_grad()
        raise
    return stats


# -- actor / learner ---------------------------------------------------------------

class TraceQueue:
    """Bounded multi-producer / single-consumer queue that drops the oldest item when full."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self.dropped = 0

    def put(self, item) -> None:
        with self._cond:
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    def get(self, timeout: Optional[float] = None):
        with self._cond:
            if not self._cond.wait_for(lambda: self._items, timeout=timeout):
                return None
            return self._items.popleft()

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


@dataclass
class LearnerState:
    params: PolicyParams
    optimizer: Adam
    env_steps: int = 0
    version: int = 0
    snapshot: Optional[PolicyParams] = None

    def publish(self) -> None:
        self.version += 1
        self.snapshot = self.params.snapshot()


@dataclass
class TrainResult:
    params: PolicyParams
    env_steps: int
    updates: int
    records: list[dict]
    checkpoints: list[str]
    best_rate: Optional[float]
    staleness: dict[int, int]
    dropped: int
    max_level: int


class _Logger:
    def __init__(self, path: Optional[str]):
        self.records: list[dict] = []
        self._fh = None
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._fh = open(path, "w")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def make_learner(config: TrainConfig, rng: np.random.Generator) -> LearnerState:
    params = init_params(policy_dims(config), config.encoder, rng, flags=config.ablation)
    if config.dtype != "float64":
        params = params.astype(config.np_dtype)
    opt = Adam(params.store, lr=config.learning_rate, max_grad_norm=config.max_grad_norm)
    learner = LearnerState(params, opt)
    learner.snapshot = params.snapshot()
    return learner


def actor_learner_loop(config: TrainConfig, params: Optional[PolicyParams] = None) -> TrainResult:
    """Train until ``total_steps`` environment steps have been consumed.

    In sync mode a single actor and the learner alternate on one random
    stream, so a fixed seed reproduces the run bit for bit.  Otherwise
    ``actors`` threads roll out episodes against the latest published
    snapshot and push them into a bounded queue the learner drains.
    """
    from .evaluation import build_eval_set, evaluate  # local: evaluation imports this module

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, actor_seed, eval_rng = (np.random.default_rng(seeds[0]), seeds[1], np.random.default_rng(seeds[2]))
    learner = make_learner(config, init_rng)
    if params is not None:
        learner.params = params.trainable()
        learner.optimizer = Adam(learner.params.store, lr=config.learning_rate, max_grad_norm=config.max_grad_norm)
        learner.snapshot = learner.params.snapshot()

    logger = _Logger(config.log_path)
    if config.checkpoint_dir:
        os.makedirs(config.checkpoint_dir, exist_ok=True)
    eval_set = None
    if config.eval_length:
        eval_set = build_eval_set(config.kind, config.eval_length, config.eval_seed)

    recent = collections.deque(maxlen=200)
    staleness: collections.Counter = collections.Counter()
    checkpoints: list[str] = []
    best: Optional[float] = None
    updates = 0
    max_level = curriculum_level(0, config.curriculum)
    next_ckpt = config.checkpoint_interval
    next_eval = config.eval_interval
    stop = threading.Event()

    def write_checkpoint(tag: str) -> None:
        if not config.checkpoint_dir:
            return
        path = os.path.join(config.checkpoint_dir, f"ckpt-{tag}.bin")
        save_checkpoint(path, learner.params, task=config.task, env_steps=learner.env_steps,
                        version=learner.version)
        checkpoints.append(path)

    def learn(batch: list[EpisodeTrace]) -> None:
        nonlocal updates, best, max_level, next_ckpt, next_eval
        level = curriculum_level(learner.env_steps, config.curriculum)
        try:
            stats = policy_gradient_update(learner.params, batch, config, learner.optimizer)
        except DiagnosticsError as exc:
            log.warning("skipping update: %s", exc)
            logger.write({"update": updates, "step": learner.env_steps, "skipped": str(exc)})
            return
        updates += 1
        learner.env_steps += sum(t.length for t in batch)
        learner.publish()
        recent.extend(t.success for t in batch)
        max_level = max(max_level, level)
        if updates % config.log_every == 0:
            logger.write({
                "update": updates, "step": learner.env_steps, "level": level,
                "mean_return": stats.mean_return, "success_rate": float(np.mean(recent)),
                "pg_loss": stats.pg_loss, "value_loss": stats.value_loss, "entropy": stats.entropy,
                "grad_norm": stats.grad_norm, "version": learner.version,
            })
        if eval_set is not None and learner.env_steps >= next_eval:
            while next_eval <= learner.env_steps:
                next_eval += config.eval_interval
            report = evaluate(learner.snapshot, eval_set, config, rng=eval_rng, greedy=config.eval_greedy)
            best = report.rate if best is None else max(best, report.rate)
            logger.write({"update": updates, "step": learner.env_steps, "eval_rate": report.rate, "best_rate": best})
            if config.stop_at_rate is not None and best >= config.stop_at_rate:
                stop.set()
        if learner.env_steps >= next_ckpt:
            while next_ckpt <= learner.env_steps:
                next_ckpt += config.checkpoint_interval
            write_checkpoint(f"{learner.env_steps:010d}")
        if learner.env_steps >= config.total_steps:
            stop.set()

    queue = TraceQueue(config.queue_capacity)
    try:
        if config.sync:
            rng = np.random.default_rng(actor_seed)
            while not stop.is_set():
                level = curriculum_level(learner.env_steps, config.curriculum)
                snap, version = learner.params, learner.version
                instances = [generate(config.kind, sample_difficulty(level, rng), rng)
                             for _ in range(config.batch_size)]
                batch = run_episodes(snap, instances, config, rng)
                for trace in batch:
                    trace.version = version
                staleness[0] += len(batch)
                learn(batch)
        else:
            _run_async(config, learner, queue, actor_seed, stop, staleness, learn)
    finally:
        logger.close()
    write_checkpoint("final")
    return TrainResult(learner.params, learner.env_steps, updates, logger.records, checkpoints, best,
                       dict(staleness), queue.dropped, max_level)


def _run_async(config: TrainConfig, learner: LearnerState, queue: TraceQueue,
               actor_seed: np.random.SeedSequence, stop: threading.Event,
               staleness: collections.Counter, learn: Callable[[list], None]) -> None:
    # bound on how many updates old a consumed trace may be
    max_lag = math.ceil((config.queue_capacity + config.batch_size) / config.batch_size)

    def actor(seed: np.random.SeedSequence) -> None:
        rng = np.random.default_rng(seed)
        while not stop.is_set():
            snap, version = learner.snapshot, learner.version
            level = curriculum_level(learner.env_steps, config.curriculum)
            instance = generate(config.kind, sample_difficulty(level, rng), rng)
            trace = run_episode(snap, instance, config, rng)
            trace.version = version
            queue.put(trace)

    threads = [threading.Thread(target=actor, args=(s,), daemon=True, name=f"actor-{i}")
               for i, s in enumerate(actor_seed.spawn(config.actors))]
    for t in threads:
        t.start()
    batch: list[EpisodeTrace] = []
    try:
        while not stop.is_set():
            trace = queue.get(timeout=0.5)
            if trace is None:
                continue
            lag = learner.version - trace.version
            if lag > max_lag:
                queue.dropped += 1
                continue
            staleness[lag] += 1
            batch.append(trace)
            if len(batch) == config.batch_size:
                learn(batch)
                batch = []
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=30)
