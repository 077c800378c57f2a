"""Layer descriptors and the model manifest format.

A model on disk is a JSON manifest plus a little-endian binary blob holding
every weight and bias tensor back to back::

    {"format": "redash-model", "version": 1, "input_shape": [3, 32, 32],
     "blob": "model.bin", "quant": {...} | null,
     "layers": [{"type": "conv2d", "in_channels": 3, "out_channels": 32,
                 "filter": 3, "stride": 1, "padding": 1,
                 "weight": {"offset": 0, "shape": [32, 3, 3, 3], "dtype": "<f8"},
                 "bias": {...}},
                {"type": "relu"}, {"type": "scale", "factor": 32, "steps": [32]},
                {"type": "dense", "outputs": 10, "weight": ..., "bias": ...}]}

Float dtypes mark a real-valued model, ``<i8`` a quantized one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import ShapeMismatch

MANIFEST_FORMAT = "redash-model"
MANIFEST_VERSION = 1


@dataclass
class Conv2d:
    in_channels: int
    out_channels: int
    filter: int
    stride: int = 1
    padding: int = 0
    weight: np.ndarray | None = None   # (out, in, f, f)
    bias: np.ndarray | None = None     # (out,)

    def out_shape(self, shape: Sequence[int]) -> tuple[int, int, int]:
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeMismatch(f"conv expects {self.in_channels} channels, got {c}")
        ho = (h + 2 * self.padding - self.filter) // self.stride + 1
        wo = (w + 2 * self.padding - self.filter) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"conv filter {self.filter} does not fit a {h}x{w} input")
        return self.out_channels, ho, wo


@dataclass
class Dense:
    outputs: int
    weight: np.ndarray | None = None   # (outputs, inputs)
    bias: np.ndarray | None = None

    def out_shape(self, shape: Sequence[int]) -> tuple[int]:
        n = int(np.prod(shape))
        if self.weight is not None and self.weight.shape[1] != n:
            raise ShapeMismatch(f"dense expects {self.weight.shape[1]} inputs, got {n}")
        return (self.outputs,)


@dataclass
class ReLU:
    def out_shape(self, shape):
        return tuple(shape)


@dataclass
class Scale:
    factor: int
    steps: tuple[int, ...] = ()

    def __post_init__(self):
        self.steps = tuple(self.steps) or (self.factor,)
        if int(np.prod(self.steps)) != self.factor:
            raise ValueError(f"scale steps {self.steps} do not multiply to {self.factor}")

    def out_shape(self, shape):
        return tuple(shape)


Layer = Union[Conv2d, Dense, ReLU, Scale]
LINEAR = (Conv2d, Dense)


@dataclass
class Model:
    input_shape: tuple[int, ...]
    layers: list = field(default_factory=list)

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape after every layer."""
        shapes, shape = [], tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1] if self.layers else tuple(self.input_shape)

    def linear_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, LINEAR)]


# -- architectures ------------------------------------------------------------------

# (in, out, filter, stride) for convolutions, "R" for ReLU, (outputs,) for dense
ARCHITECTURES = {
    "f": [(3, 32, 3, 1), "R", (32, 32, 3, 1), "R", (32, 32, 2, 2), (32, 64, 3, 1), "R",
          (64, 64, 3, 1), "R", (64, 64, 2, 2), (64, 128, 3, 1), "R", (128, 128, 3, 1), "R", (10,)],
    "F": [(3, 64, 3, 1), "R", (64, 64, 3, 1), "R", (64, 64, 2, 2), (64, 64, 3, 1), "R",
          (64, 64, 3, 1), "R", (64, 64, 2, 2), (64, 64, 3, 1), "R", (64, 64, 1, 1), "R",
          (64, 16, 1, 1), "R", (10,)],
}


def same_padding(filter_size: int, stride: int) -> int:
    # stride-1 convs keep the spatial size; strided ones downsample unpadded
    return (filter_size - 1) // 2 if stride == 1 else 0


def build_architecture(name: str, input_hw: int = 32) -> Model:
    """Weightless layer list of model ``f`` or ``F`` for a square input."""
    try:
        spec = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    layers = []
    for item in spec:
        if item == "R":
            layers.append(ReLU())
        elif len(item) == 4:
            a, b, c, d = item
            layers.append(Conv2d(a, b, c, d, same_padding(c, d)))
        else:
            layers.append(Dense(item[0]))
    return Model((3, input_hw, input_hw), layers)


def random_weights(model: Model, rng: np.random.Generator, std: float | None = None) -> Model:
    """Fill every linear layer with Gaussian weights (He scaling unless ``std`` given)."""
    shape = tuple(model.input_shape)
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.filter ** 2
            sd = std if std is not None else np.sqrt(2.0 / fan_in)
            layer.weight = rng.normal(0, sd, (layer.out_channels, layer.in_channels, layer.filter, layer.filter))
            layer.bias = rng.normal(0, 0.05, layer.out_channels)
        elif isinstance(layer, Dense):
            fan_in = int(np.prod(shape))
            sd = std if std is not None else np.sqrt(2.0 / fan_in)
            layer.weight = rng.normal(0, sd, (layer.outputs, fan_in))
            layer.bias = rng.normal(0, 0.05, layer.outputs)
        shape = layer.out_shape(shape)
    return model


# -- manifest i/o ---------------------------------------------------------------------

def _put(blob: bytearray, arr: np.ndarray, dtype: str) -> dict:
    a = np.ascontiguousarray(arr, dtype=dtype)
    entry = {"offset": len(blob), "shape": list(a.shape), "dtype": dtype}
    blob.extend(a.tobytes())
    return entry


def _get(blob: bytes, entry: dict) -> np.ndarray:
    dt = np.dtype(entry["dtype"])
    count = int(np.prod(entry["shape"]))
    start = entry["offset"]
    end = start + count * dt.itemsize
    if end > len(blob):
        raise ShapeMismatch("tensor extends past end of blob")
    return np.frombuffer(blob[start:end], dtype=dt).reshape(entry["shape"]).copy()


def encode_manifest(model: Model, quant: dict | None = None, blob_name: str = "model.bin") -> tuple[dict, bytes]:
    blob = bytearray()
    layers = []
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            d = {"type": "conv2d", "in_channels": layer.in_channels, "out_channels": layer.out_channels,
                 "filter": layer.filter, "stride": layer.stride, "padding": layer.padding}
        elif isinstance(layer, Dense):
            d = {"type": "dense", "outputs": layer.outputs}
        elif isinstance(layer, ReLU):
            d = {"type": "relu"}
        else:
            d = {"type": "scale", "factor": layer.factor, "steps": list(layer.steps)}
        if isinstance(layer, LINEAR) and layer.weight is not None:
            dtype = "<i8" if np.issubdtype(np.asarray(layer.weight).dtype, np.integer) else "<f8"
            d["weight"] = _put(blob, layer.weight, dtype)
            d["bias"] = _put(blob, layer.bias, dtype)
        layers.append(d)
    manifest = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                "input_shape": list(model.input_shape), "blob": blob_name,
                "quant": quant, "layers": layers}
    return manifest, bytes(blob)


def decode_manifest(manifest: dict, blob: bytes) -> tuple[Model, dict | None]:
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ShapeMismatch("not a redash model manifest")
    layers = []
    for d in manifest["layers"]:
        t = d["type"]
        if t == "conv2d":
            layer = Conv2d(d["in_channels"], d["out_channels"], d["filter"], d.get("stride", 1), d.get("padding", 0))
        elif t == "dense":
            layer = Dense(d["outputs"])
        elif t == "relu":
            layer = ReLU()
        elif t == "scale":
            layer = Scale(d["factor"], tuple(d.get("steps", ())))
        else:
            raise ShapeMismatch(f"unknown layer type {t!r}")
        if "weight" in d:
            layer.weight = _get(blob, d["weight"])
            layer.bias = _get(blob, d["bias"])
        layers.append(layer)
    model = Model(tuple(manifest["input_shape"]), layers)
    model.shapes()
    return model, manifest.get("quant")


def save_model(model: Model, path: str | Path, quant: dict | None = None) -> Path:
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    manifest, blob = encode_manifest(model, quant, blob_path.name)
    path.write_text(json.dumps(manifest, indent=1))
    blob_path.write_bytes(blob)
    return path


def load_model(path: str | Path) -> tuple[Model, dict | None]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    blob = (path.parent / manifest["blob"]).read_bytes()
    return decode_manifest(manifest, blob)
