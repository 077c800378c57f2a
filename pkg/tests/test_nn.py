import numpy as np
import pytest

from redash.engine import GarblingContext
from redash.errors import RangeOverflow, ShapeMismatch, UnrealizableScale
from redash.model import (Conv2d, Dense, Model, ReLU, Scale, build_architecture, load_model, random_weights,
                          save_model)
from redash.nn import (conv_as_matmul, conv_direct, conv_matmul, decode_output, encode_input, eval_model,
                       garble_model, im2col_index, plaintext_infer)
from redash.quant import QuantParams, QuantizedModel, scale_quant_plus
from redash.rns import make_base, scale_signed_plain


def qmodel(input_shape, layers, moduli=(2, 3, 5, 7, 11), scheme="ScaleQuantPlus", s=None):
    return QuantizedModel(tuple(input_shape), layers, QuantParams(scheme, make_base(moduli), scale_factor=s))


def naive_infer(model, x):
    """Python-int reference with explicit loops."""
    base = model.base
    v = [[[int(x[c, i, j]) for j in range(x.shape[2])] for i in range(x.shape[1])] for c in range(x.shape[0])] \
        if x.ndim == 3 else [int(t) for t in x]
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            C, H, W = len(v), len(v[0]), len(v[0][0])
            f, s, pad = layer.filter, layer.stride, layer.padding
            Ho, Wo = (H + 2 * pad - f) // s + 1, (W + 2 * pad - f) // s + 1
            out = []
            for o in range(layer.out_channels):
                plane = []
                for i in range(Ho):
                    row = []
                    for j in range(Wo):
                        acc = int(layer.bias[o])
                        for c in range(C):
                            for dy in range(f):
                                for dx in range(f):
                                    y, xx = i * s + dy - pad, j * s + dx - pad
                                    if 0 <= y < H and 0 <= xx < W:
                                        acc += int(layer.weight[o, c, dy, dx]) * v[c][y][xx]
                        row.append(acc)
                    plane.append(row)
                out.append(plane)
            v = out
        elif isinstance(layer, Dense):
            flat = list(np.asarray(v, dtype=object).reshape(-1))
            v = [int(layer.bias[o]) + sum(int(layer.weight[o, i]) * int(flat[i]) for i in range(len(flat)))
                 for o in range(layer.outputs)]
        elif isinstance(layer, ReLU):
            v = np.maximum(np.asarray(v, dtype=object), 0).tolist()
        elif isinstance(layer, Scale):
            arr = np.asarray(v, dtype=object)
            for st in layer.steps:
                arr = np.vectorize(lambda t: scale_signed_plain(int(t), st, base), otypes=[object])(arr)
            v = arr.tolist()
    return np.asarray(v, dtype=np.int64)


def test_identity_conv_and_unit_dense():
    x = np.arange(-8, 10).reshape(2, 3, 3)
    conv = Conv2d(2, 2, 1, 1, 0, np.eye(2, dtype=np.int64).reshape(2, 2, 1, 1), np.zeros(2, dtype=np.int64))
    assert np.array_equal(plaintext_infer(qmodel(x.shape, [conv]), x), x)
    dense = Dense(1, np.ones((1, 18), dtype=np.int64), np.zeros(1, dtype=np.int64))
    assert plaintext_infer(qmodel(x.shape, [dense]), x).tolist() == [int(x.sum())]


def test_plaintext_matches_naive_random():
    rng = np.random.default_rng(7)
    for _ in range(10):
        layers = [Conv2d(2, 3, 3, 1, 1, rng.integers(-3, 4, (3, 2, 3, 3)), rng.integers(-5, 6, 3)),
                  Scale(5), ReLU(), Dense(4, rng.integers(-3, 4, (4, 48)), rng.integers(-5, 6, 4))]
        m = qmodel((2, 4, 4), layers, s=5)
        x = rng.integers(-6, 7, (2, 4, 4))
        assert np.array_equal(plaintext_infer(m, x), naive_infer(m, x))


def test_plaintext_errors():
    m = qmodel((4,), [Dense(1, np.full((1, 4), 500), np.zeros(1, dtype=np.int64))])
    with pytest.raises(ShapeMismatch):
        plaintext_infer(m, np.zeros(3, dtype=np.int64))
    with pytest.raises(RangeOverflow):
        plaintext_infer(m, np.full(4, 1000))
    with pytest.raises(RangeOverflow):
        plaintext_infer(m, np.full(4, 10 ** 6))


def test_im2col_shape():
    layer = Conv2d(3, 4, 3, 1, 0)
    idx = im2col_index(layer, (3, 5, 5))
    assert idx.shape == (27, 9)
    matrix, _ = conv_as_matmul(Conv2d(3, 4, 3, 1, 0, np.zeros((4, 3, 3, 3))), (3, 5, 5))
    assert matrix.shape == (4, 27)


def test_1x1_conv_is_dense_per_pixel():
    rng = np.random.default_rng(2)
    w = rng.integers(-5, 6, (4, 3, 1, 1))
    x = rng.integers(-9, 10, (3, 5, 6))
    out = conv_matmul(x, Conv2d(3, 4, 1, 1, 0, w))
    per_pixel = np.einsum("oc,chw->ohw", w[:, :, 0, 0], x)
    assert np.array_equal(out, per_pixel)


def test_conv_dual_path_random():
    rng = np.random.default_rng(11)
    for _ in range(200):
        C, O, f = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
        s, pad = rng.integers(1, 3), rng.integers(0, 2)
        H, W = rng.integers(f, 8), rng.integers(f, 8)
        layer = Conv2d(C, O, f, s, pad, rng.integers(-9, 10, (O, C, f, f)))
        x = rng.integers(-50, 50, (C, H, W))
        assert np.array_equal(conv_direct(x, layer), conv_matmul(x, layer))


def test_linear_only_model_is_free():
    rng = np.random.default_rng(0)
    m = qmodel((3, 4, 4), [Conv2d(3, 2, 3, 1, 1, rng.integers(-2, 3, (2, 3, 3, 3)), rng.integers(-2, 3, 2)),
                           Dense(3, rng.integers(-2, 3, (3, 32)), rng.integers(-2, 3, 3))])
    gm, keys = garble_model(m, GarblingContext(b"lin", 16))
    assert gm.ciphertext_count == 0
    x = rng.integers(-3, 4, (3, 4, 4))
    assert np.array_equal(decode_output(keys, eval_model(gm, encode_input(keys, x))), plaintext_infer(m, x))


def test_zero_weights_decode_to_bias():
    m = qmodel((6,), [Dense(2, np.zeros((2, 6), dtype=np.int64), np.array([7, -4])), ReLU()])
    gm, keys = garble_model(m, GarblingContext(b"z", 16))
    out = decode_output(keys, eval_model(gm, encode_input(keys, np.zeros(6, dtype=np.int64))))
    assert out.tolist() == [7, 0]


def test_toy_conv_net_100_inputs():
    rng = np.random.default_rng(3)
    base = (2, 3, 5, 7, 11, 13)
    layers = [Conv2d(3, 2, 3, 1, 1, rng.integers(-2, 3, (2, 3, 3, 3)), rng.integers(-3, 4, 2)), Scale(6), ReLU(),
              Dense(3, rng.integers(-2, 3, (3, 32)), rng.integers(-3, 4, 3))]
    m = qmodel((3, 4, 4), layers, base, s=6)
    gm, keys = garble_model(m, GarblingContext(b"toy", 16))
    for _ in range(100):
        x = rng.integers(-8, 9, (3, 4, 4))
        assert np.array_equal(decode_output(keys, eval_model(gm, encode_input(keys, x))), plaintext_infer(m, x))


def test_scale_layer_count_matches_costing():
    from redash.costing import scaling_cost
    base = (32, 167, 173)
    m = qmodel((5,), [Scale(32)], base, s=32)
    gm, _ = garble_model(m, GarblingContext(b"c", 16, row_reduction=False))
    assert gm.ciphertext_count == 5 * scaling_cost(make_base(base), 32)
    assert sum(gm.layer_ciphertexts()) == gm.ciphertext_count


def test_unrealizable_scale():
    m = qmodel((2,), [Scale(7)], (2, 3, 5), s=7)
    with pytest.raises(UnrealizableScale):
        garble_model(m, GarblingContext(b"u", 16))


def test_range_check_on_garble():
    m = qmodel((4,), [Dense(1, np.full((1, 4), 2000), np.zeros(1, dtype=np.int64))])
    with pytest.raises(RangeOverflow):
        garble_model(m, GarblingContext(b"r", 16), input_bound=100)


def test_model_f_layer_sequence():
    m = build_architecture("f", 32)
    kinds = ["R" if isinstance(l, ReLU) else ("D" if isinstance(l, Dense) else
             (l.in_channels, l.out_channels, l.filter, l.stride)) for l in m.layers]
    assert kinds == [(3, 32, 3, 1), "R", (32, 32, 3, 1), "R", (32, 32, 2, 2), (32, 64, 3, 1), "R",
                     (64, 64, 3, 1), "R", (64, 64, 2, 2), (64, 128, 3, 1), "R", (128, 128, 3, 1), "R", "D"]
    assert m.shapes()[-2] == (128, 8, 8)
    assert build_architecture("f", 8).shapes()[-2] == (128, 2, 2)
    assert build_architecture("F", 32).output_shape == (10,)
    with pytest.raises(ValueError):
        build_architecture("g")


def test_manifest_round_trip(tmp_path):
    m = build_architecture("f", 8)
    random_weights(m, np.random.default_rng(0))
    path = save_model(m, tmp_path / "f.json", {"k": 1})
    back, quant = load_model(path)
    assert quant == {"k": 1}
    for a, b in zip(m.layers, back.layers):
        assert type(a) is type(b)
        if isinstance(a, (Conv2d, Dense)):
            assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
    qm = scale_quant_plus(m, 32, make_base((32, 167, 173)))
    path = save_model(qm, tmp_path / "q.json", qm.params.to_dict())
    back, quant = load_model(path)
    assert back.layers[1].steps == (32,) and back.layers[0].weight.dtype == np.int64


def test_manifest_shape_errors(tmp_path):
    m = Model((3, 4, 4), [Conv2d(2, 2, 3)])
    with pytest.raises(ShapeMismatch):
        m.shapes()
    with pytest.raises(ShapeMismatch):
        Model((3, 2, 2), [Conv2d(3, 2, 3)]).shapes()
