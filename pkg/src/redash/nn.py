"""Quantized CNN evaluation: plaintext oracle and garbled passes.

Tensors are channel-major ``(C, H, W)`` and flattened in that order.  A
garbled activation is one label bundle per base modulus (a residue plane);
linear layers are public-constant matrix products on every plane and cost no
ciphertexts, ReLU and Scale layers go through the gadgets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Backend, Bundle, EvaluatorBackend, GarblerBackend, GarblingContext, HASH_ALG_ID, TableBlock, decode_batch, matmul_mod
from .errors import CircuitMismatch, InvalidScaleFactor, RangeOverflow, ShapeMismatch, UnrealizableScale
from .gadgets import crt_planes, relu_circuit, scale_circuit
from .model import Conv2d, Dense, ReLU, Scale
from .quant import QuantizedModel, check_range
from .rns import RnsBase, scale_encoded_array, scale_moduli, signed_range

FORMAT_VERSION = 1


def im2col_index(layer: Conv2d, in_shape) -> np.ndarray:
    """Gather map ``(C*f*f, Ho*Wo)`` into the flattened input; ``-1`` marks padding.

    Row ``c*f*f + dy*f + dx`` matches the flattened weight layout ``(out, C, f, f)``.
    """
    C, H, W = in_shape
    _, Ho, Wo = layer.out_shape(in_shape)
    f, s, pad = layer.filter, layer.stride, layer.padding
    c, dy, dx = np.meshgrid(np.arange(C), np.arange(f), np.arange(f), indexing="ij")
    oy, ox = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
    y = oy.reshape(1, -1) * s + dy.reshape(-1, 1) - pad
    x = ox.reshape(1, -1) * s + dx.reshape(-1, 1) - pad
    inside = (y >= 0) & (y < H) & (x >= 0) & (x < W)
    flat = c.reshape(-1, 1) * H * W + y * W + x
    return np.where(inside, flat, -1)


def conv_as_matmul(layer: Conv2d, in_shape) -> tuple[np.ndarray, np.ndarray]:
    """Matrix form of a convolution: ``(weights (out, C*f*f), gather index)``."""
    matrix = np.asarray(layer.weight).reshape(layer.out_channels, -1)
    return matrix, im2col_index(layer, in_shape)


def conv_matmul(x: np.ndarray, layer: Conv2d) -> np.ndarray:
    """Convolution of an integer ``(C, H, W)`` tensor via im2col, without bias."""
    matrix, index = conv_as_matmul(layer, x.shape)
    padded = np.append(np.asarray(x).reshape(-1), np.zeros(1, dtype=x.dtype))
    out = matrix.astype(x.dtype) @ padded[index]
    return out.reshape(layer.out_shape(x.shape))


def conv_direct(x: np.ndarray, layer: Conv2d) -> np.ndarray:
    """Reference convolution by sliding the kernel, without bias."""
    C, H, W = x.shape
    _, Ho, Wo = layer.out_shape(x.shape)
    f, s, pad = layer.filter, layer.stride, layer.padding
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + H, pad:pad + W] = x
    w = np.asarray(layer.weight).astype(x.dtype)
    out = np.zeros((layer.out_channels, Ho, Wo), dtype=x.dtype)
    for dy in range(f):
        for dx in range(f):
            patch = xp[:, dy:dy + s * (Ho - 1) + 1:s, dx:dx + s * (Wo - 1) + 1:s]
            out += np.tensordot(w[:, :, dy, dx], patch, axes=([1], [0]))
    return out


def _check_input(model: QuantizedModel, x) -> np.ndarray:
    x = np.asarray(x)
    if tuple(x.shape) != tuple(model.input_shape):
        raise ShapeMismatch(f"input shape {x.shape} != model input {tuple(model.input_shape)}")
    lo, hi = signed_range(model.base.product)
    if x.size and (x.min() < lo or x.max() > hi):
        raise RangeOverflow("input outside the signed range")
    return x.astype(np.int64)


def plaintext_infer(model: QuantizedModel, x) -> np.ndarray:
    """Exact integer inference with the gadgets' scaling semantics.

    Raises ``RangeOverflow`` when a linear layer output leaves the signed
    range, since the ring computation would then wrap.
    """
    base = model.base
    P = base.product
    lo, hi = signed_range(P)
    v = _check_input(model, x)
    shape = tuple(model.input_shape)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (Conv2d, Dense)):
            w = np.asarray(layer.weight)
            fan_in = int(np.prod(w.shape[1:]))
            worst = int(np.abs(w).max(initial=0)) * int(np.abs(v).max(initial=0)) * fan_in
            big = np.int64 if worst + int(np.abs(layer.bias).max(initial=0)) < 1 << 62 else object
            v = v.astype(big)
            if isinstance(layer, Conv2d):
                out = conv_matmul(v.reshape(shape), layer)
                out = out + np.asarray(layer.bias).astype(big).reshape(-1, 1, 1)
            else:
                out = np.asarray(layer.weight).astype(big) @ v.reshape(-1) + np.asarray(layer.bias).astype(big)
            if out.size and (out.min() < lo or out.max() > hi):
                raise RangeOverflow(f"layer {i} output leaves the signed range [{lo}, {hi}]")
            v = out.astype(np.int64)
        elif isinstance(layer, Scale):
            e = scale_encoded_array(v % P, layer.steps, base)
            v = np.where(e < (P + 1) // 2, e, e - P)
        elif isinstance(layer, ReLU):
            v = np.maximum(v, 0)
        shape = layer.out_shape(shape)
        v = v.reshape(shape)
    return v


# -- garbled passes --------------------------------------------------------------------

def _forward(bk: Backend, model: QuantizedModel, planes: dict[int, Bundle], layer_marks: list | None = None):
    base = model.base
    shape = tuple(model.input_shape)
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            matrix, index = conv_as_matmul(layer, shape)
            out_shape = layer.out_shape(shape)
            pixels = index.shape[1]
            bias = np.repeat(np.asarray(layer.bias, dtype=np.int64), pixels)
            new = {}
            for m, b in planes.items():
                g = bk.gather(b, index.reshape(-1))
                data = matmul_mod(np.asarray(matrix, dtype=np.int64) % m,
                                  g.data.reshape(index.shape[0], pixels, -1), m)
                new[m] = bk.cadd(Bundle(m, data.reshape(out_shape[0] * pixels, -1)), bias)
            planes = new
        elif isinstance(layer, Dense):
            planes = {m: bk.cadd(bk.linear(b, layer.weight), layer.bias) for m, b in planes.items()}
        elif isinstance(layer, Scale):
            for s in layer.steps:
                planes = scale_circuit(bk, base, planes, s)
        elif isinstance(layer, ReLU):
            planes = relu_circuit(bk, base, planes)
        shape = layer.out_shape(shape)
        if layer_marks is not None:
            layer_marks.append(len(bk.tables) if isinstance(bk, GarblerBackend) else None)
    return planes


@dataclass
class GarbledModel:
    """Everything the evaluator receives offline: public circuit plus tables."""

    model: QuantizedModel
    lam: int
    row_reduction: bool
    tables: list[TableBlock]
    layer_tables: list[int] = field(default_factory=list)   # table count after each layer
    hash_alg: int = HASH_ALG_ID
    version: int = FORMAT_VERSION

    @property
    def base(self) -> RnsBase:
        return self.model.base

    @property
    def ciphertext_count(self) -> int:
        return sum(t.ciphertexts for t in self.tables)

    def layer_ciphertexts(self) -> list[int]:
        counts, start = [], 0
        for end in self.layer_tables:
            counts.append(sum(t.ciphertexts for t in self.tables[start:end]))
            start = end
        return counts


@dataclass
class GarblerKeys:
    """Garbler-only secrets for encoding inputs and decoding outputs."""

    base: RnsBase
    lam: int
    offsets: dict[int, np.ndarray]
    inputs: dict[int, np.ndarray]
    outputs: dict[int, np.ndarray]
    output_shape: tuple[int, ...]


def garble_model(model: QuantizedModel, ctx: GarblingContext, input_bound: int | None = None):
    """Garble ``model``; returns ``(GarbledModel, GarblerKeys)``.

    With ``input_bound`` the worst-case range check must pass first.
    """
    base = model.base
    for layer in model.layers:
        if isinstance(layer, Scale):
            for s in layer.steps:
                try:
                    scale_moduli(s, base)
                except InvalidScaleFactor as exc:
                    raise UnrealizableScale(str(exc)) from exc
    if input_bound is not None:
        report = check_range(model, input_bound)
        if not report.ok:
            raise RangeOverflow("model fails the range check:\n" + "\n".join(report.lines()))
    bk = GarblerBackend(ctx)
    n_in = int(np.prod(model.input_shape))
    planes = {m: bk.inputs(m, n_in) for m in base.moduli}
    marks: list = []
    out = _forward(bk, model, planes, marks)
    gm = GarbledModel(model, ctx.lam, ctx.row_reduction, bk.tables, marks)
    keys = GarblerKeys(base, ctx.lam, {m: ctx.offset(m) for m in base.moduli},
                       {m: b.data for m, b in planes.items()}, {m: b.data for m, b in out.items()},
                       tuple(model.output_shape))
    return gm, keys


def eval_model(gm: GarbledModel, inputs: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    base = gm.base
    n_in = int(np.prod(gm.model.input_shape))
    planes = {}
    for m in base.moduli:
        if m not in inputs:
            raise ShapeMismatch(f"missing input labels for modulus {m}")
        lab = np.asarray(inputs[m], dtype=np.int64)
        if lab.ndim != 2 or lab.shape[0] != n_in:
            raise ShapeMismatch(f"modulus {m}: expected {n_in} input labels, got {lab.shape}")
        planes[m] = Bundle(m, lab)
    bk = EvaluatorBackend(gm.tables, gm.lam)
    out = _forward(bk, gm.model, planes)
    if not bk.exhausted:
        raise CircuitMismatch("garbled model has unused tables")
    return {m: b.data for m, b in out.items()}


def encode_input(keys: GarblerKeys, x) -> dict[int, np.ndarray]:
    """Input labels for a signed integer tensor."""
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    out = {}
    for m in keys.base.moduli:
        zero = keys.inputs[m]
        if zero.shape[0] != x.size:
            raise ShapeMismatch(f"expected {zero.shape[0]} input values, got {x.size}")
        out[m] = (zero + (x % m)[:, None] * keys.offsets[m]) % m
    return out


def decode_output(keys: GarblerKeys, labels: dict[int, np.ndarray]) -> np.ndarray:
    base = keys.base
    residues = {m: decode_batch(keys.outputs[m], labels[m], keys.offsets[m], m) for m in base.moduli}
    e = crt_planes(base, residues)
    P = base.product
    signed = np.where(e < (P + 1) // 2, e, e - P)
    return signed.reshape(keys.output_shape)
