"""Binary formats: garbled model container, label sets and garbler keys.

All integers are little-endian.  Garbled model container::

    magic "RDGM" | u16 version | u8 hash alg | u16 lambda | u8 row reduction
    u16 k | k x u32 moduli
    u32 manifest length | manifest JSON | u64 blob length | blob
    u32 layer count | layer count x u32 table marks
    u32 block count | blocks
    sha256 over everything above

    block: u8 kind | u8 reduced | u64 first gate id | u8 n_in | n_in x u32 in moduli
           | u32 out modulus | u32 gates | u32 rows | u32 words | gates*rows*words x u32

Label set::

    magic "RDLB" | u16 version | u16 planes | planes x (u32 modulus | u32 wires | u32 n | wires*n x u32)
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .engine import TableBlock
from .errors import AuthFailure, MalformedFrame, VersionMismatch
from .model import decode_manifest, encode_manifest
from .quant import QuantizedModel, QuantParams
from .rns import make_base

MODEL_MAGIC = b"RDGM"
LABELS_MAGIC = b"RDLB"
KEYS_MAGIC = b"RDKY"
VERSION = 1
DIGEST = 32


class Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise MalformedFrame(f"truncated: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def u(self, fmt: str) -> int:
        return self.unpack(fmt)[0]

    def array(self, count: int, dtype="<u4") -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt)

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def _magic(r: Reader, magic: bytes):
    if bytes(r.take(4)) != magic:
        raise MalformedFrame(f"bad magic, expected {magic!r}")
    version = r.u("<H")
    if version != VERSION:
        raise VersionMismatch(f"format version {version}, this build reads {VERSION}")


def _block_bytes(t: TableBlock) -> bytes:
    head = struct.pack("<BBQB", t.kind, int(t.reduced), t.gate_id, len(t.in_moduli))
    head += struct.pack(f"<{len(t.in_moduli)}I", *t.in_moduli)
    head += struct.pack("<IIII", t.out_modulus, *t.rows.shape)
    return head + np.ascontiguousarray(t.rows, dtype="<u4").tobytes()


def serialize_model(gm) -> bytes:
    """Container bytes for a ``GarbledModel``; deterministic for a given model."""
    model = gm.model
    manifest, blob = encode_manifest(model, model.params.to_dict(), "")
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    moduli = model.params.base.moduli
    parts = [MODEL_MAGIC, struct.pack("<HBHB", gm.version, gm.hash_alg, gm.lam, int(gm.row_reduction)),
             struct.pack(f"<H{len(moduli)}I", len(moduli), *moduli),
             struct.pack("<I", len(mbytes)), mbytes, struct.pack("<Q", len(blob)), blob,
             struct.pack(f"<I{len(gm.layer_tables)}I", len(gm.layer_tables), *gm.layer_tables),
             struct.pack("<I", len(gm.tables))]
    parts.extend(_block_bytes(t) for t in gm.tables)
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    parts.append(h.digest())
    return b"".join(parts)


def deserialize_model(data: bytes):
    from .nn import GarbledModel

    r = Reader(data)
    _magic(r, MODEL_MAGIC)
    hash_alg, lam, rr = r.unpack("<BHB")
    k = r.u("<H")
    moduli = tuple(int(m) for m in r.array(k))
    mbytes = bytes(r.take(r.u("<I")))
    blob = bytes(r.take(r.u("<Q")))
    marks = [int(v) for v in r.array(r.u("<I"))]
    tables = []
    for _ in range(r.u("<I")):
        kind, reduced, gate_id, n_in = r.unpack("<BBQB")
        in_moduli = tuple(int(m) for m in r.array(n_in))
        out_modulus, gates, rows, words = r.unpack("<IIII")
        arr = r.array(gates * rows * words).reshape(gates, rows, words)
        tables.append(TableBlock(kind, gate_id, in_moduli, out_modulus, np.asarray(arr, dtype=np.uint32), bool(reduced)))
    body_end = r.pos
    if r.remaining != DIGEST:
        raise MalformedFrame(f"expected {DIGEST}-byte digest trailer, found {r.remaining} bytes")
    if hashlib.sha256(r.data[:body_end]).digest() != bytes(r.take(DIGEST)):
        raise AuthFailure("garbled model digest mismatch")
    try:
        manifest = json.loads(mbytes)
        model, quant = decode_manifest(manifest, blob)
    except (ValueError, KeyError) as exc:
        raise MalformedFrame(f"bad model manifest: {exc}") from exc
    params = QuantParams.from_dict(quant)
    if params.base.moduli != moduli:
        raise MalformedFrame("container base disagrees with model manifest")
    qm = QuantizedModel(model.input_shape, model.layers, params)
    return GarbledModel(qm, lam, bool(rr), tables, marks, hash_alg)


def _planes_bytes(planes: dict) -> bytes:
    parts = [struct.pack("<H", len(planes))]
    for m, arr in planes.items():
        arr = np.asarray(arr)
        w, n = arr.shape
        parts.append(struct.pack("<III", m, w, n))
        parts.append(np.ascontiguousarray(arr, dtype="<u4").tobytes())
    return b"".join(parts)


def _read_planes(r: Reader) -> dict:
    planes = {}
    for _ in range(r.u("<H")):
        m, w, n = r.unpack("<III")
        planes[int(m)] = r.array(w * n).reshape(w, n).astype(np.int64)
    return planes


def serialize_labels(planes: dict) -> bytes:
    return LABELS_MAGIC + struct.pack("<H", VERSION) + _planes_bytes(planes)


def deserialize_labels(data: bytes) -> dict:
    r = Reader(data)
    _magic(r, LABELS_MAGIC)
    planes = _read_planes(r)
    if r.remaining:
        raise MalformedFrame(f"{r.remaining} trailing bytes after label set")
    return planes


def serialize_keys(keys) -> bytes:
    moduli = keys.base.moduli
    shape = keys.output_shape
    head = KEYS_MAGIC + struct.pack("<HH", VERSION, keys.lam)
    head += struct.pack(f"<H{len(moduli)}I", len(moduli), *moduli)
    head += struct.pack(f"<B{len(shape)}I", len(shape), *shape)
    offsets = {m: keys.offsets[m][None, :] for m in moduli}
    return head + _planes_bytes(offsets) + _planes_bytes(keys.inputs) + _planes_bytes(keys.outputs)


def deserialize_keys(data: bytes):
    from .nn import GarblerKeys

    r = Reader(data)
    _magic(r, KEYS_MAGIC)
    lam = r.u("<H")
    moduli = tuple(int(m) for m in r.array(r.u("<H")))
    shape = tuple(int(v) for v in r.array(r.u("<B")))
    offsets = {m: a[0] for m, a in _read_planes(r).items()}
    inputs = _read_planes(r)
    outputs = _read_planes(r)
    return GarblerKeys(make_base(moduli), lam, offsets, inputs, outputs, shape)
