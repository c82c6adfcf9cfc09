"""End-to-end acceptance checks, one pass/fail line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed at the end of the run.
"""
import itertools
import time

import numpy as np
import pytest

from modmachine import autodiff as ad
from modmachine.cli import main
from modmachine.context import AblationFlags, encode_sigma, encode_xi, sigma_blocks
from modmachine.evaluation import build_eval_set, evaluate
from modmachine.gradsuite import TOLERANCE, run_suite
from modmachine.machine import Action, apply_action, init_machine
from modmachine.modules import MODULE_NAMES, ModuleSpec, eval_module, pool_for_task
from modmachine.oracles import verify_environment
from modmachine.policy import EncoderKind, forward, init_params
from modmachine.tasks import TaskKind, generate, num_landmark_channels, task_vocab
from modmachine.tokens import from_char, to_char
from modmachine.trainer import (TrainConfig, actor_learner_loop, context_shape, episode_reward,
                                policy_dims, run_episodes, t_max)
from test_modules import SYMBOLS, oracle_table

# -- 1. oracle check -----------------------------------------------------------------


def test_criterion_1_oracle_check(capsys, acceptance_line):
    start = time.perf_counter()
    codes = [main(["oracle-check", kind.value, "--max-len", "100"]) for kind in TaskKind]
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out.splitlines()
    reports = [verify_environment(kind, 100) for kind in TaskKind]
    ratio = max(r.max_step_ratio for r in reports)
    ok = (codes == [0] * 5 and out == [f"{k}: 100/100 lengths OK" for k in TaskKind]
          and all(r.passed == 100 for r in reports) and ratio <= 3.0 and elapsed < 60.0)
    acceptance_line(1, ok, f"5 x 100/100 lengths, max steps/L {ratio:.3f} (<= 3), {elapsed:.1f}s (< 60s)")
    assert ok


# -- 2. module table -----------------------------------------------------------------


@pytest.mark.parametrize("base", [10, 16])
def test_criterion_2_module_table(base, acceptance_line):
    alphabet = "0123456789abcdef"[:base] + SYMBOLS
    checked = mismatches = 0
    for name in MODULE_NAMES:
        spec = ModuleSpec(name, base)
        for x, y in itertools.product(alphabet, repeat=2):
            checked += 1
            if to_char(eval_module(spec, from_char(x), from_char(y))) != oracle_table(name, x, y, base):
                mismatches += 1
    acceptance_line(2, mismatches == 0, f"B={base}: {checked} entries, {mismatches} mismatches")
    assert mismatches == 0


# -- 3. gradient suite ---------------------------------------------------------------


def test_criterion_3_gradient_suite(acceptance_line):
    results = run_suite(shapes=20)
    worst = {dt: max(r.max_error for r in results if r.dtype == dt) for dt in TOLERANCE}
    ok = (all(r.ok and r.shapes >= 20 and r.min_length == 1 for r in results)
          and {r.dtype for r in results} == set(TOLERANCE))
    acceptance_line(3, ok, f"{len(results)} checks x 20 shapes incl. L=1; worst float64 {worst['float64']:.1e} "
                           f"(< 1e-6), float32 {worst['float32']:.1e} (< 1e-4)")
    assert ok


# -- 4. length invariance ------------------------------------------------------------


@pytest.mark.parametrize("encoder", list(EncoderKind))
def test_criterion_4_length_invariance(encoder, acceptance_line):
    config = TrainConfig(task="copy", encoder=encoder.value)
    params = init_params(policy_dims(config), encoder, np.random.default_rng(0))
    count = params.count()
    vocab = task_vocab("copy")
    worst = 0.0
    lengths = []
    for n in (1, 10, 100):
        state = init_machine(generate("copy", n, np.random.default_rng(n)))
        state = apply_action(state, Action(1, (0, n - 1), (n + 1,)), pool_for_task("copy"))
        out = forward(params, encode_xi(state, vocab, 5), encode_sigma(state, vocab))
        lengths.append(out.length)
        sums = [np.exp(ad.log_softmax(out.module_logits).data).sum()]
        sums += list(np.exp(ad.log_softmax(out.head_logits).data).sum(axis=-1))
        worst = max(worst, max(abs(s - 1.0) for s in sums))
        assert params.count() == count
    ok = lengths == [3, 21, 201] and worst <= 1e-6
    acceptance_line(4, ok, f"{encoder}: L={lengths}, {count} params, max |sum-1| {worst:.1e} (<= 1e-6)")
    assert ok


# -- 5. shape law --------------------------------------------------------------------


def test_criterion_5_shape_law(acceptance_line):
    rows = []
    ok = True
    for kind in TaskKind:
        V, lm, k = len(task_vocab(kind)), num_landmark_channels(kind), len(pool_for_task(kind))
        state = init_machine(generate(kind, 3, np.random.default_rng(1)))
        sigma = encode_sigma(state, task_vocab(kind))
        xi = encode_xi(state, task_vocab(kind), k)
        heads = sigma[sigma_blocks(context_shape(kind))["heads"]]
        ok &= sigma.shape[0] == V + lm + 3 and xi.shape == (3 * V + k,)
        ok &= not heads.any() and not xi.any()
        rows.append(f"{kind} {sigma.shape[0]}/{xi.shape[0]}")
    acceptance_line(5, ok, "sigma/xi widths " + ", ".join(rows) + "; history all-zero at t=0")
    assert ok


# -- 6. ablation wiring --------------------------------------------------------------


def test_criterion_6_ablation_wiring(acceptance_line):
    kind = TaskKind.ADD
    vocab, k = task_vocab(kind), 2
    state = init_machine(generate(kind, 3, np.random.default_rng(2)))
    state = apply_action(state, Action(1, (1, 5), (12,)), pool_for_task(kind))
    blocks = sigma_blocks(context_shape(kind))
    H, V = 3, len(vocab)
    full_s, full_x = encode_sigma(state, vocab), encode_xi(state, vocab, k)
    xi_blocks = {"head_values": slice(0, H * V), "module": slice(H * V, H * V + k)}
    expect = {
        "no_tape_values": ({"tokens"}, set()),
        "no_action_history": ({"heads"}, {"head_values", "module"}),
        "no_history_tape_values": (set(), {"head_values"}),
    }
    ok = True
    for flag, (sig_zero, xi_zero) in expect.items():
        flags = AblationFlags(**{flag: True})
        s, x = encode_sigma(state, vocab, flags), encode_xi(state, vocab, k, flags)
        for name, sl in blocks.items():
            want = np.zeros_like(full_s[sl]) if name in sig_zero else full_s[sl]
            ok &= full_s[sl].any() and np.array_equal(s[sl], want)
        for name, sl in xi_blocks.items():
            want = np.zeros_like(full_x[sl]) if name in xi_zero else full_x[sl]
            ok &= full_x[sl].any() and np.array_equal(x[sl], want)
    acceptance_line(6, ok, "each flag zeroes exactly its sigma/xi block, all others bit-identical")
    assert ok


# -- 7. desk-scale training ----------------------------------------------------------

DESK_SCALE = dict(
    task="copy", encoder="attention", total_steps=2_000_000, batch_size=8, entropy_weight=0.001,
    curriculum={"c_min": 2, "c_max": 5, "ramp_start": 0, "ramp_end": 800_000},
    eval_length=5, eval_interval=50_000, stop_at_rate=0.9, log_every=50,
)


@pytest.mark.slow
def test_criterion_7_desk_scale_training(tmp_path, acceptance_line):
    rows, best = [], []
    for seed in range(3):
        config = TrainConfig(**DESK_SCALE, seed=seed, log_path=str(tmp_path / f"seed{seed}.jsonl"))
        start = time.perf_counter()
        result = actor_learner_loop(config)
        assert result.max_level <= 5
        rate = result.best_rate or 0.0
        best.append(rate)
        rows.append(f"seed {seed}: {rate:.2f} @ {result.env_steps // 1000}k steps "
                    f"({time.perf_counter() - start:.0f}s)")
    ok = max(best) >= 0.9
    passed = sum(r >= 0.9 for r in best)
    acceptance_line(7, ok, f"{passed}/3 seeds >= 0.90 on 100 length-5 copies (sampled); " + "; ".join(rows))
    assert ok

# -- 8. first learning signal --------------------------------------------------------


def _mean_return(params, config, rng, episodes=1000):
    instances = [generate("copy", 1, rng) for _ in range(episodes)]
    traces = run_episodes(params, instances, config, rng)
    returns = np.array([episode_reward(t, config.reward, config.step_cost).sum() for t in traces])
    return returns.mean(), returns.std(ddof=1) / np.sqrt(episodes)


def test_criterion_8_learning_signal(acceptance_line):
    rows = []
    ok = True
    for seed in range(3):
        # stop early enough that the final batch cannot overshoot 50k steps
        budget = 50_000 - 32 * t_max(3, 8.0)
        config = TrainConfig(task="copy", reward="sparse", entropy_weight=0.0, total_steps=budget, seed=seed,
                             batch_size=32, curriculum={"c_min": 1, "c_max": 1, "ramp_start": 0, "ramp_end": 1})
        init = init_params(policy_dims(config), config.encoder, np.random.default_rng([seed, 8]))
        before, se0 = _mean_return(init, config, np.random.default_rng([seed, 80]))
        result = actor_learner_loop(config, params=init)
        after, se1 = _mean_return(result.params, config, np.random.default_rng([seed, 81]))
        margin = 3.0 * np.hypot(se0, se1)
        ok &= result.env_steps <= 50_000 and after - before > margin
        rows.append(f"seed {seed}: {before:.3f} -> {after:.3f}")
    acceptance_line(8, ok, "; ".join(rows) + " (mean return, 1000 episodes, > 3 SE gain within 50k steps)")
    assert ok


# -- 9. reproducibility --------------------------------------------------------------


def test_criterion_9_sync_determinism(tmp_path, acceptance_line):
    logs = []
    for run in ("a", "b"):
        path = tmp_path / f"{run}.jsonl"
        config = TrainConfig(task="copy", seed=123, total_steps=20_000, sync=True, actors=1, log_path=str(path),
                             curriculum={"c_min": 2, "c_max": 4, "ramp_start": 0, "ramp_end": 15_000})
        actor_learner_loop(config)
        logs.append(path.read_bytes())
    ok = logs[0] == logs[1] and len(logs[0]) > 0
    records = len(logs[0].splitlines())
    acceptance_line(9, ok, f"two seeded sync runs, {records} log records each, byte-identical: {ok}")
    assert ok
