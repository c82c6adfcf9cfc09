import itertools

import pytest

from modmachine.modules import MODULE_NAMES, ModuleSpec, eval_module, pool_for_task
from modmachine.tokens import EMPTY, PLUS, SEP, STAR, from_char, to_char

SYMBOLS = ".$+*"


def oracle_table(name, x, y, base):
    """Second, string-level reading of the module formulas."""
    digits = "0123456789abcdef"[:base]

    def num(c):
        return c in digits

    if name == "Reset":
        return "."
    if name == "Identity":
        return x
    if name == "Increment":
        return digits[(int(x, 16) + 1) % base] if num(x) else "."
    if name == "Max":
        order = SYMBOLS + digits
        return max(x, y, key=order.index)
    if name == "Sum":
        return digits[(int(x, 16) + int(y, 16)) % base] if num(x) and num(y) else "0"
    if name == "SumInc":
        return digits[(int(x, 16) + int(y, 16) + 1) % base] if num(x) and num(y) else "0"
    raise KeyError(name)


@pytest.mark.parametrize("base", [10, 16])
def test_exhaustive_table_matches_oracle(base):
    alphabet = "0123456789abcdef"[:base] + SYMBOLS
    mismatches = []
    for name in MODULE_NAMES:
        spec = ModuleSpec(name, base)
        for x, y in itertools.product(alphabet, repeat=2):
            got = to_char(eval_module(spec, from_char(x), from_char(y)))
            if got != oracle_table(name, x, y, base):
                mismatches.append((name, x, y, got))
    assert mismatches == []


@pytest.mark.parametrize("name,x,y,base,want", [
    ("Sum", ".", "5", 10, "0"),
    ("Identity", "7", "$", 10, "7"),
    ("SumInc", "9", "9", 10, "9"),
    ("Increment", "9", ".", 10, "0"),
    ("Max", "3", "7", 10, "7"),
    ("Reset", "4", "2", 10, "."),
    ("Increment", "f", ".", 16, "0"),
])
def test_examples(name, x, y, base, want):
    assert to_char(eval_module(ModuleSpec(name, base), from_char(x), from_char(y))) == want


def test_call_returns_one_output_per_write_head():
    assert ModuleSpec("Sum")(7, 7) == (4,)


@pytest.mark.parametrize("base", [10, 16])
def test_digit_outputs_stay_in_base(base):
    tokens = list(range(base)) + [EMPTY, SEP, PLUS, STAR]
    for name in ("Sum", "SumInc", "Increment"):
        spec = ModuleSpec(name, base)
        for x, y in itertools.product(tokens, repeat=2):
            out = eval_module(spec, x, y)
            assert out == EMPTY or 0 <= out < base


def test_unknown_module_rejected():
    with pytest.raises(ValueError):
        ModuleSpec("Multiply")


def test_pools():
    assert [m.name for m in pool_for_task("copy")] == ["Reset", "Identity", "Increment", "Max", "Sum"]
    assert [m.name for m in pool_for_task("add")] == ["Sum", "SumInc"]
    assert all(m.base == 16 for m in pool_for_task("filter_even"))
    assert pool_for_task("reverse") == pool_for_task("reverse")
