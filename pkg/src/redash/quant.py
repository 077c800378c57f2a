"""Quantization of real-valued models into ring integers.

SimpleQuant multiplies everything by a constant ``alpha``.  ScaleQuant uses
``2**ell`` for weights and inputs and ``2**(2*ell)`` for biases, and inserts a
power-of-two Scale layer after every linear layer (realised as ``ell`` chained
scale-by-2 gadgets).  ScaleQuantPlus does the same with a factor ``s`` that is
one base modulus or a product of distinct base moduli, realised as a single
fused gadget.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidScaleFactor, OutOfRange, RangeOverflow, UnrealizableScale
from .model import LINEAR, Conv2d, Dense, Model, ReLU, Scale
from .rns import RnsBase, make_base, scale_moduli, signed_range

SIMPLE = "SimpleQuant"
SCALE = "ScaleQuant"
SCALE_PLUS = "ScaleQuantPlus"


def round_half_away(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


@dataclass(frozen=True)
class QuantParams:
    scheme: str
    base: RnsBase
    alpha: float | None = None
    ell: int | None = None
    scale_factor: int | None = None

    @property
    def input_factor(self):
        if self.scheme == SIMPLE:
            return self.alpha
        if self.scheme == SCALE:
            return 2 ** self.ell
        return self.scale_factor

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "base": list(self.base.moduli), "alpha": self.alpha,
                "ell": self.ell, "scale_factor": self.scale_factor}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(d["scheme"], make_base(d["base"]), d.get("alpha"), d.get("ell"), d.get("scale_factor"))


@dataclass
class QuantizedModel(Model):
    params: QuantParams | None = None

    @property
    def base(self) -> RnsBase:
        return self.params.base

    @property
    def scale_positions(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Scale)]


def _check_encodable(q: np.ndarray, base: RnsBase | None, what: str):
    if base is None or q.size == 0:
        return
    lo, hi = signed_range(base.product)
    if q.min() < lo or q.max() > hi:
        raise RangeOverflow(f"{what} leaves the signed range [{lo}, {hi}] of base ({base})")


def simple_quant(values, alpha: float, base: RnsBase | None = None) -> np.ndarray:
    if not alpha > 0:
        raise OutOfRange(f"alpha must be positive, got {alpha}")
    q = round_half_away(np.asarray(values, dtype=np.float64) * alpha)
    _check_encodable(q, base, "quantized value")
    return q


def _quantize(model: Model, w_factor, b_factor, scale: Scale | None, params: QuantParams) -> QuantizedModel:
    layers = []
    for layer in model.layers:
        if isinstance(layer, Scale):
            raise ValueError("real-valued model already contains Scale layers")
        layer = copy.copy(layer)
        if isinstance(layer, LINEAR):
            if layer.weight is None:
                raise ValueError("linear layer without weights")
            layer.weight = round_half_away(np.asarray(layer.weight) * w_factor)
            layer.bias = round_half_away(np.asarray(layer.bias) * b_factor)
            _check_encodable(layer.weight, params.base, "weight")
            _check_encodable(layer.bias, params.base, "bias")
            layers.append(layer)
            if scale is not None:
                layers.append(Scale(scale.factor, scale.steps))
        else:
            layers.append(layer)
    return QuantizedModel(tuple(model.input_shape), layers, params)


def quantize_simple(model: Model, alpha: float, base: RnsBase) -> QuantizedModel:
    if not alpha > 0:
        raise OutOfRange(f"alpha must be positive, got {alpha}")
    return _quantize(model, alpha, alpha, None, QuantParams(SIMPLE, base, alpha=alpha))


def scale_quant(model: Model, ell: int, base: RnsBase) -> QuantizedModel:
    """Power-of-two quantization; rescaling chains ``ell`` scale-by-2 gadgets."""
    if ell < 1:
        raise OutOfRange(f"ell must be >= 1, got {ell}")
    if 2 not in base.moduli or len(base) < 2:
        raise UnrealizableScale(f"scaling by 2 needs modulus 2 in the base ({base})")
    s = 2 ** ell
    return _quantize(model, s, s * s, Scale(s, (2,) * ell), QuantParams(SCALE, base, ell=ell))


def scale_quant_plus(model: Model, s: int, base: RnsBase) -> QuantizedModel:
    """Quantize by ``s`` drawn from the base; each rescale is one fused gadget."""
    scale_moduli(s, base)
    return _quantize(model, s, s * s, Scale(s, (s,)), QuantParams(SCALE_PLUS, base, scale_factor=s))


def quantize_input(x, params: QuantParams) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) * params.input_factor)
    _check_encodable(q, params.base, "input")
    return q


@dataclass
class LayerRange:
    index: int
    kind: str
    bound: int
    ok: bool


@dataclass
class RangeReport:
    product: int
    limit: int
    input_bound: int
    layers: list[LayerRange] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.input_bound <= self.limit and all(l.ok for l in self.layers)

    def lines(self) -> list[str]:
        out = [f"base product {self.product}, magnitude limit {self.limit}, input bound {self.input_bound}"]
        for l in self.layers:
            out.append(f"  layer {l.index:2d} {l.kind:7s} bound {l.bound:>14d}  {'ok' if l.ok else 'OVERFLOW'}")
        out.append("PASS" if self.ok else "FAIL")
        return out


def check_range(model: QuantizedModel, input_bound: int) -> RangeReport:
    """Worst-case accumulator magnitude of every linear layer.

    A linear output is bounded by ``max_i(sum_j |w_ij| * X + |b_i|)`` for
    inputs bounded by ``X``; Scale layers shrink the bound, ReLU keeps it.
    Values are exact only while the bound stays within the signed range.
    """
    base = model.params.base
    lo, hi = signed_range(base.product)
    limit = min(-lo, hi)
    report = RangeReport(base.product, limit, int(input_bound))
    X = int(input_bound)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, LINEAR):
            w = np.abs(np.asarray(layer.weight, dtype=object)).reshape(layer.weight.shape[0], -1)
            b = np.abs(np.asarray(layer.bias, dtype=object))
            rows = w.sum(axis=1) * X + b
            X = int(max(rows)) if len(rows) else 0
            report.layers.append(LayerRange(i, "conv2d" if isinstance(layer, Conv2d) else "dense", X, X <= limit))
        elif isinstance(layer, Scale):
            for s in layer.steps:
                X = X // s + 1
    return report


def suggest_base(model: QuantizedModel, input_bound: int, candidates) -> RnsBase | None:
    """Smallest candidate base that realises the model's scales and passes the range check."""
    for base in sorted(candidates, key=lambda b: b.product):
        try:
            for layer in model.layers:
                if isinstance(layer, Scale):
                    for s in layer.steps:
                        scale_moduli(s, base)
        except InvalidScaleFactor:
            continue
        trial = QuantizedModel(model.input_shape, model.layers, QuantParams(
            model.params.scheme, base, model.params.alpha, model.params.ell, model.params.scale_factor))
        if check_range(trial, input_bound).ok:
            return base
    return None
