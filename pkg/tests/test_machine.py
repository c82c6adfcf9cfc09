import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modmachine.machine import (Action, HeadConfig, IllegalAction, apply_action, check_halt, init_machine,
                                render_trace)
from modmachine.modules import pool_for_task
from modmachine.tasks import TaskInstance, TaskKind, generate, make_instance
from modmachine.tokens import EMPTY, parse_tape, tape_to_str

POOL = pool_for_task("copy")
RESET, IDENTITY, INCREMENT, MAX, SUM = range(5)


def state_for(text):
    inst = make_instance("copy", parse_tape(text.split("$")[0]))
    s = init_machine(inst)
    return s.__class__(**{**s.__dict__, "tape": parse_tape(text)})


def test_init_machine():
    inst = make_instance("copy", [1, 2])
    s = init_machine(inst)
    assert s.tape == inst.initial_tape
    assert s.landmarks == (0, 0, 2, 4)
    assert s.step == 0 and s.prev_module is None


@pytest.mark.parametrize("tape,action,want", [
    ("12$.", Action(IDENTITY, (0, 0), (3,)), "12$1"),
    ("12$.", Action(RESET, (0, 1), (0,)), ".2$."),
    ("77$.", Action(SUM, (0, 1), (3,)), "77$4"),
])
def test_apply_action_examples(tape, action, want):
    s = state_for(tape)
    out = apply_action(s, action, POOL)
    assert tape_to_str(out.tape) == want
    assert out.step == 1 and out.prev_module == action.module
    assert out.prev_reads == action.reads and out.prev_writes == action.writes


@pytest.mark.parametrize("action", [
    Action(5, (0, 0), (1,)),
    Action(0, (0, 9), (1,)),
    Action(0, (0, 0), (-1,)),
    Action(0, (0,), (1,)),
])
def test_illegal_actions(action):
    with pytest.raises(IllegalAction):
        apply_action(state_for("12$.."), action, POOL)


def test_check_halt():
    inst = make_instance("copy", [1, 2])
    s = init_machine(inst)
    assert not check_halt(s, inst)
    s = apply_action(s, Action(IDENTITY, (0, 0), (3,)), POOL)
    assert not check_halt(s, inst)
    s = apply_action(s, Action(IDENTITY, (1, 1), (4,)), POOL)
    assert check_halt(s, inst)
    # rewriting a correct value keeps the episode solved
    s = apply_action(s, Action(IDENTITY, (1, 1), (4,)), POOL)
    assert check_halt(s, inst)


def test_filter_without_evens_halts_at_start():
    inst = make_instance("filter_even", parse_tape("135"))
    assert check_halt(init_machine(inst), inst)


def test_render_trace():
    s = init_machine(make_instance("copy", [1, 2, 3]))
    t0 = render_trace(s)
    assert t0.splitlines()[0] == "task=copy L=7 t=0"
    assert t0.splitlines()[1] == "123$..."
    assert t0.splitlines()[2] == ""
    s = apply_action(s, Action(IDENTITY, (0, 0), (4,)), POOL)
    s = apply_action(s, Action(IDENTITY, (1, 1), (5,)), POOL)
    lines = render_trace(s).splitlines()
    assert lines[1] == "123$12."
    assert lines[2] == " r   w"
    assert lines[3] == "^  ^  ^"
    later = s.__class__(**{**s.__dict__, "step": 9})
    assert render_trace(later).splitlines()[1:] == lines[1:]
    assert render_trace(later).splitlines()[0] != lines[0]


def test_read_and_write_on_same_cell_marked_b():
    s = apply_action(state_for("12$.."), Action(IDENTITY, (3, 0), (3,)), POOL)
    assert render_trace(s).splitlines()[2] == "r  b"


def test_bad_instance_rejected():
    inst = make_instance("copy", [1])
    bad = inst.__class__(**{**inst.__dict__, "target_positions": (7,)})
    with pytest.raises(ValueError):
        init_machine(bad)


def test_head_config():
    assert HeadConfig().total == 3
    with pytest.raises(ValueError):
        HeadConfig(reads=0)


@st.composite
def states_and_actions(draw):
    kind = draw(st.sampled_from(list(TaskKind)))
    n = draw(st.integers(1, 65 if kind is TaskKind.ADD else 100))
    inst = generate(kind, n, np.random.default_rng(draw(st.integers(0, 2**32 - 1))))
    pool = pool_for_task(kind)
    state = init_machine(inst)
    L = inst.length
    pos = st.integers(0, L - 1)
    actions = draw(st.lists(st.builds(Action, st.integers(0, len(pool) - 1), st.tuples(pos, pos),
                                      st.tuples(pos)), min_size=1, max_size=6))
    return inst, pool, state, actions


@settings(max_examples=150, deadline=None)
@given(states_and_actions())
def test_frame_determinism_and_landmarks(case):
    inst, pool, state, actions = case
    assert 1 <= inst.length <= 201
    for a in actions:
        nxt = apply_action(state, a, pool)
        assert nxt == apply_action(state, a, pool)
        changed = {i for i, (x, y) in enumerate(zip(state.tape, nxt.tape)) if x != y}
        assert changed <= set(a.writes)
        assert nxt.landmarks == state.landmarks
        state = nxt


def test_single_cell_tape():
    inst = TaskInstance(TaskKind.COPY, (EMPTY,), (0, 0), (0,), (5,), 1)
    s = init_machine(inst)
    assert s.landmarks == (0, 0, 0, 0)
    s = apply_action(s, Action(INCREMENT, (0, 0), (0,)), POOL)
    assert s.tape == (EMPTY,)
    assert not check_halt(s, inst)
