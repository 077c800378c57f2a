import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from redash.engine import (Bundle, EvaluatorBackend, GarblerBackend, GarblingContext, add_labels, cadd,
                           cmul, component_count, decode, encode, eval_lookup2, eval_projection, fresh_wire,
                           garble_lookup2, garble_projection, matmul_mod, new_context, secrets_after_add,
                           secrets_after_cmul)
from redash.errors import AuthFailure, CircuitMismatch, ModulusMismatch, OutOfRange
from redash.rns import make_base


def test_component_count_examples():
    assert component_count(167, 16) == 3
    assert component_count(2, 128) == 128
    assert 167 ** 2 < 2 ** 16 <= 167 ** 3
    for p in (2, 3, 32, 173):
        for lam in (16, 64, 128):
            n = component_count(p, lam)
            assert p ** n >= 2 ** lam > p ** (n - 1)


def test_offset_has_unit_component():
    ctx = new_context(b"x", 16, make_base((32, 167, 173)))
    for p in (2, 3, 32, 167, 173):
        R = ctx.offset(p)
        assert R[0] == 1 and len(R) == ctx.n(p)


def test_context_determinism():
    a, b = GarblingContext(b"same", 16), GarblingContext(b"same", 16)
    assert np.array_equal(a.random_labels(7, 5), b.random_labels(7, 5))
    assert np.array_equal(a.offset(5), b.offset(5))
    c = GarblingContext(b"other", 16)
    assert not np.array_equal(a.offset(173), c.offset(173))


def test_encode_examples(ctx):
    w = fresh_wire(ctx, 5)
    assert encode(0, w) == w.base_label
    assert np.array_equal(encode(1, w).array(), (w.base_label.array() + w.offset.array()) % 5)
    wrapped = add_labels(encode(4, w), w.offset)
    assert wrapped == w.base_label
    with pytest.raises(OutOfRange):
        encode(5, w)


def test_add_labels_exhaustive(ctx):
    x, y = fresh_wire(ctx, 5), fresh_wire(ctx, 5)
    z = secrets_after_add(x, y)
    for a in range(5):
        for b in range(5):
            assert decode(add_labels(encode(a, x), encode(b, y)), z) == (a + b) % 5
    with pytest.raises(ModulusMismatch):
        add_labels(encode(0, x), encode(0, fresh_wire(ctx, 7)))


def test_add_associative(ctx):
    w = [fresh_wire(ctx, 7) for _ in range(3)]
    l = [encode(v, s) for v, s in zip((1, 5, 6), w)]
    assert add_labels(add_labels(l[0], l[1]), l[2]) == add_labels(l[0], add_labels(l[1], l[2]))


def test_cmul_exhaustive(ctx):
    w = fresh_wire(ctx, 7)
    assert cmul(encode(3, w), 1) == encode(3, w)
    assert all(v == 0 for v in cmul(encode(3, w), 0).components)
    for c in range(7):
        out = secrets_after_cmul(w, c)
        for a in range(7):
            assert decode(cmul(encode(a, w), c), out) == a * c % 7


def test_cadd(ctx):
    w = fresh_wire(ctx, 6)
    assert cadd(w, 0) == w
    up = cadd(w, 3)
    for a in range(6):
        assert decode(encode(a, w), up) == (a + 3) % 6
    down = cadd(up, -1)
    assert [decode(encode(a, w), down) for a in range(6)] == [(a + 2) % 6 for a in range(6)]


def test_projection_rows_and_semantics():
    for rr, want in ((False, 2), (True, 1)):
        ctx = GarblingContext(b"p", 16, row_reduction=rr)
        w = fresh_wire(ctx, 2)
        table, out = garble_projection(lambda v: v, w, 2, ctx)
        assert table.ciphertexts == want
        for a in range(2):
            assert decode(eval_projection(table, encode(a, w)), out) == a


@pytest.mark.parametrize("rr", [False, True])
def test_projection_mod5_to_mod3(rr):
    ctx = GarblingContext(b"p", 16, row_reduction=rr)
    w = fresh_wire(ctx, 5)
    table, out = garble_projection(lambda v: v % 3, w, 3, ctx)
    assert table.ciphertexts == (4 if rr else 5)
    assert decode(eval_projection(table, encode(4, w)), out) == 1
    for a in range(5):
        assert decode(eval_projection(table, encode(a, w)), out) == a % 3


def test_constant_projection(ctx):
    ctx = GarblingContext(b"c", 16, row_reduction=False)
    w = fresh_wire(ctx, 7)
    table, out = garble_projection(lambda v: 2, w, 5, ctx)
    assert table.ciphertexts == 7
    assert {decode(eval_projection(table, encode(a, w)), out) for a in range(7)} == {2}


def test_projection_tamper_detected(ctx):
    ctx = GarblingContext(b"t", 16, row_reduction=False)
    w = fresh_wire(ctx, 5)
    table, _ = garble_projection(lambda v: v, w, 5, ctx)
    table.rows[0, :, -1] ^= 1
    with pytest.raises(AuthFailure):
        for a in range(5):
            eval_projection(table, encode(a, w))


def test_lookup2_examples(ctx):
    b, v = fresh_wire(ctx, 2), fresh_wire(ctx, 5)
    table, out = garble_lookup2(lambda x, y: x * y, b, v, 5, ctx)
    assert table.ciphertexts == 10
    for x in range(2):
        for y in range(5):
            assert decode(eval_lookup2(table, encode(x, b), encode(y, v)), out) == x * y

    s, t = fresh_wire(ctx, 3), fresh_wire(ctx, 3)
    comb = lambda a, c: a if a != 1 else c
    table, out = garble_lookup2(comb, s, t, 3, ctx)
    assert table.ciphertexts == 9
    for a in range(3):
        for c in range(3):
            assert decode(eval_lookup2(table, encode(a, s), encode(c, t)), out) == comb(a, c)

    table, out = garble_lookup2(lambda x, y: x, s, v, 3, ctx)
    for a in range(3):
        for y in range(5):
            assert decode(eval_lookup2(table, encode(a, s), encode(y, v)), out) == a


@pytest.mark.parametrize("p,q,m", [(2, 3, 5), (7, 11, 4), (32, 3, 2), (13, 13, 13)])
def test_lookup2_homomorphism_exhaustive(p, q, m):
    ctx = GarblingContext(b"h", 16)
    g = GarblerBackend(ctx)
    x, y = g.inputs(p, p * q), g.inputs(q, p * q)
    psi = np.random.default_rng(p * q).integers(0, m, (p, q))
    out = g.lookup2(x, y, m, psi)
    a, b = np.repeat(np.arange(p), q), np.tile(np.arange(q), p)
    e = EvaluatorBackend(g.tables, 16)
    res = e.lookup2(Bundle(p, g.encode(x, a)), Bundle(q, g.encode(y, b)), m, psi)
    assert np.array_equal(g.decode(out, res.data), psi[a, b])


@pytest.mark.parametrize("p,q", [(2, 3), (5, 3), (167, 32), (173, 2), (97, 101)])
def test_projection_homomorphism_exhaustive(p, q):
    for rr in (False, True):
        ctx = GarblingContext(b"h", 16, rr)
        g = GarblerBackend(ctx)
        x = g.inputs(p, p)
        phi = np.random.default_rng(p).integers(0, q, p)
        out = g.proj(x, q, phi)
        e = EvaluatorBackend(g.tables, 16)
        res = e.proj(Bundle(p, g.encode(x, np.arange(p))), q, phi)
        assert np.array_equal(g.decode(out, res.data), phi)
        assert g.tables[0].ciphertexts == p * (p - 1 if rr else p)


def test_free_operations_cost_nothing():
    g = GarblerBackend(GarblingContext(b"f", 16))
    x, y = g.inputs(7, 4), g.inputs(7, 4)
    z = g.cadd(g.cmul(g.add(x, y), 3), 5)
    g.linear(z, np.ones((2, 4), dtype=np.int64))
    assert g.tables == []


def test_linear_and_cadd_semantics():
    rng = np.random.default_rng(0)
    g = GarblerBackend(GarblingContext(b"l", 16))
    p = 173
    x = g.inputs(p, 6)
    W = rng.integers(-20, 20, (4, 6))
    b = rng.integers(-5, 5, 4)
    out = g.cadd(g.linear(x, W), b)
    v = rng.integers(0, p, 6)
    labels = Bundle(p, g.encode(x, v))
    e = EvaluatorBackend([], 16)
    res = e.cadd(e.linear(labels, W), b)
    assert np.array_equal(g.decode(out, res.data), (W @ v + b) % p)


def test_evaluator_detects_wrong_circuit():
    g = GarblerBackend(GarblingContext(b"m", 16))
    x = g.inputs(5, 3)
    g.proj(x, 3, np.arange(5) % 3)
    e = EvaluatorBackend(g.tables, 16)
    with pytest.raises(CircuitMismatch):
        e.proj(Bundle(5, g.encode(x, np.zeros(3, dtype=np.int64))), 2, np.arange(5) % 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 300), st.integers(1, 40), st.integers(1, 40), st.integers(1, 6), st.integers(0, 2 ** 32))
def test_matmul_mod(p, rows, inner, cols, seed):
    rng = np.random.default_rng(seed)
    A = rng.integers(0, p, (rows, inner))
    B = rng.integers(0, p, (inner, cols))
    want = (A.astype(object) @ B.astype(object)) % p
    assert np.array_equal(matmul_mod(A, B, p), want.astype(np.int64))


def test_matmul_mod_wide_path():
    p = 2 ** 31 - 1
    rng = np.random.default_rng(1)
    A = rng.integers(0, p, (3, 70))
    B = rng.integers(0, p, (70, 2))
    want = (A.astype(object) @ B.astype(object)) % p
    assert np.array_equal(matmul_mod(A, B, p), want.astype(np.int64))


def test_garbling_deterministic():
    def build(seed):
        g = GarblerBackend(GarblingContext(seed, 16))
        x = g.inputs(11, 8)
        g.proj(x, 7, np.arange(11) % 7)
        g.lookup2(g.proj(x, 2, np.arange(11) % 2), x, 11, np.outer(np.arange(2), np.arange(11)))
        return [t.rows.tobytes() for t in g.tables]

    assert build(b"s") == build(b"s")
    assert build(b"s") != build(b"t")
