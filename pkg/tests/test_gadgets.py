import math

import numpy as np
import pytest

from redash.engine import GarblingContext
from redash.gadgets import (garble_base_extension, garble_relu, garble_scaling, garble_scaling_chain, garble_sign,
                            make_scaling_spec, crt_planes)
from redash.errors import InvalidScaleFactor
from redash.rns import base_extend, decode_signed, encode_signed, make_base, scale_signed_plain

from conftest import run_gadget


def signed_all(b):
    return [decode_signed(e, b.product) for e in range(b.product)]


def test_be_table_example(ctx):
    b = make_base((2, 3))
    g = garble_base_extension(b, 1, ctx, 2)
    out = run_gadget(g, [1, 0])
    assert out[3].tolist() == [1, 0]


@pytest.mark.parametrize("moduli", [(2, 3, 5), (3, 5, 7), (4, 9, 5), (7, 2, 3, 5)])
def test_be_exhaustive(moduli, ctx):
    b = make_base(moduli)
    for target in range(len(moduli)):
        others = [m for i, m in enumerate(moduli) if i != target]
        ys = np.arange(math.prod(others))
        g = garble_base_extension(b, target, ctx, len(ys))
        out = run_gadget(g, ys)[moduli[target]]
        want = [base_extend([int(y) % m for m in others], b, target) for y in ys]
        assert out.tolist() == want == (ys % moduli[target]).tolist()


def test_be_cost_pruned(ctx):
    ctx = GarblingContext(b"c", 16, row_reduction=False)
    assert garble_base_extension(make_base((2, 3, 5)), 2, ctx).ciphertext_count == 7
    assert garble_base_extension(make_base((2, 3)), 1, ctx).ciphertext_count == 2


def _scale_check(b, s, ctx):
    g = garble_scaling(make_scaling_spec(b, s), ctx, b.product)
    res = run_gadget(g, np.arange(b.product))
    got = crt_planes(b, res)
    want = [encode_signed(scale_signed_plain(x, s, b), b.product) for x in signed_all(b)]
    assert got.tolist() == want
    return g


def test_scaling_table_example(ctx):
    b = make_base((2, 3))
    g = _scale_check(b, 3, ctx)
    res = run_gadget(g, np.arange(6))
    assert crt_planes(b, res).tolist() == [0, 0, 0, 5, 5, 5]


@pytest.mark.parametrize("moduli,s", [((2, 3, 5), 5), ((2, 3, 5), 6), ((3, 5, 7), 7), ((4, 9, 5), 36),
                                      ((2, 3, 5, 7), 15), ((2, 3, 5, 7), 2)])
def test_scaling_exhaustive(moduli, s, ctx):
    _scale_check(make_base(moduli), s, ctx)


def test_scaling_random_large(ctx):
    b = make_base((32, 167, 173))
    x = np.random.default_rng(3).integers(0, b.product, 2000)
    g = garble_scaling(make_scaling_spec(b, 32), ctx, len(x))
    got = crt_planes(b, run_gadget(g, x))
    want = [encode_signed(scale_signed_plain(decode_signed(int(e), b.product), 32, b), b.product) for e in x]
    assert got.tolist() == want


def test_scaling_spec():
    spec = make_scaling_spec(make_base((2, 3, 5, 7)), 15)
    assert spec.s_moduli == (3, 5) and spec.shift_up == 105 and spec.shift_down == 7
    with pytest.raises(InvalidScaleFactor):
        make_scaling_spec(make_base((2, 3, 5)), 7)


def test_scaling_cost_input_independent():
    b = make_base((2, 3, 5, 7))
    c1 = garble_scaling(make_scaling_spec(b, 5), GarblingContext(b"a", 16), 1).ciphertext_count
    c9 = garble_scaling(make_scaling_spec(b, 5), GarblingContext(b"b", 16), 9).ciphertext_count
    assert c9 == 9 * c1


def test_chain_matches_sequential_oracle(ctx):
    b = make_base((2, 3, 5, 7))
    g = garble_scaling_chain(b, (2, 3), ctx, b.product)
    got = crt_planes(b, run_gadget(g, np.arange(b.product)))
    want = [encode_signed(scale_signed_plain(scale_signed_plain(x, 2, b), 3, b), b.product) for x in signed_all(b)]
    assert got.tolist() == want


@pytest.mark.parametrize("moduli", [(2, 3, 5), (3, 5, 7), (4, 9, 5), (5, 7, 11), (2, 3, 5, 7, 11), (32, 167, 3)])
def test_sign_exhaustive(moduli, ctx):
    b = make_base(moduli)
    g = garble_sign(b, ctx, b.product)
    got = run_gadget(g, np.arange(b.product))[2]
    want = [int(x >= 0) for x in signed_all(b)]
    assert got.tolist() == want
    assert got[0] == 1 and got[-1] == 0


@pytest.mark.parametrize("moduli", [(2, 3, 5), (3, 5, 7), (4, 9, 5)])
def test_relu_exhaustive(moduli, ctx):
    b = make_base(moduli)
    g = garble_relu(b, ctx, b.product)
    got = crt_planes(b, run_gadget(g, np.arange(b.product)))
    want = [encode_signed(max(x, 0), b.product) for x in signed_all(b)]
    assert got.tolist() == want


def test_relu_small_values(ctx):
    b = make_base((2, 3, 5))
    g = garble_relu(b, ctx, 2)
    got = crt_planes(b, run_gadget(g, [encode_signed(-1, 30), 2]))
    assert got.tolist() == [0, 2]


def test_relu_random_large(ctx):
    b = make_base((32, 167, 173))
    x = np.random.default_rng(5).integers(0, b.product, 3000)
    g = garble_relu(b, ctx, len(x))
    got = crt_planes(b, run_gadget(g, x))
    want = np.where(x < (b.product + 1) // 2, x, 0)
    assert np.array_equal(got, want)


def test_table1_probes(ctx):
    b = make_base((2, 3))
    g = garble_scaling(make_scaling_spec(b, 3), ctx, 6, probes=True)
    assert set(g.secrets.probes) == {"x_up", "y_prime", "y"}
