"""Arithmetic garbling over Z_p.

A wire of modulus ``p`` carries a label of ``n`` components in ``Z_p`` where
``n`` is the smallest integer with ``p**n >= 2**lam``.  The garbler keeps a
zero label ``l0`` per wire and one global offset ``R`` per modulus; the label
of value ``a`` is ``l0 + a*R``.  ``R[0]`` is fixed to 1, so the first
component (the *color*) of a label is ``l0[0] + a mod p``: a public,
garbler-permuted row index for projection tables.

Labels are handled in batches (``(wires, components)`` int64 arrays, one
batch per modulus).  Tables are stored as ``uint32`` words.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import AuthFailure, CircuitMismatch, ModulusMismatch, OutOfRange

HASH_ALG_ID = 1  # blake2s / blake2b / shake256 chosen by output width
PROJ = 1
LOOKUP2 = 2

KIND_NAMES = {PROJ: "projection", LOOKUP2: "lookup2"}


def component_count(p: int, lam: int) -> int:
    n, acc, target = 1, p, 1 << lam
    while acc < target:
        acc *= p
        n += 1
    return n


def _hash_rows(msgs: np.ndarray, words: int) -> np.ndarray:
    """Hash every row of a ``uint8`` matrix to ``words`` little-endian uint32s."""
    nbytes = 4 * words
    count, width = msgs.shape
    buf = np.ascontiguousarray(msgs).tobytes()
    if nbytes <= 32:
        h = hashlib.blake2s
        out = b"".join([h(buf[i:i + width], digest_size=nbytes).digest()
                        for i in range(0, count * width, width)])
    elif nbytes <= 64:
        h = hashlib.blake2b
        out = b"".join([h(buf[i:i + width], digest_size=nbytes).digest()
                        for i in range(0, count * width, width)])
    else:
        h = hashlib.shake_256
        out = b"".join([h(buf[i:i + width]).digest(nbytes)
                        for i in range(0, count * width, width)])
    return np.frombuffer(out, dtype="<u4").reshape(count, words)


def _as_bytes(a: np.ndarray, dtype: str) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    return a.view(np.uint8).reshape(a.shape[0], -1)


def prf(labels: Sequence[np.ndarray], gate_ids: np.ndarray, rows: np.ndarray, words: int) -> np.ndarray:
    """Pad for each (input labels, gate id, row index) triple.

    ``labels`` holds one ``(N, n_i)`` array per gate input; the message is the
    canonical uint32 encoding of every label followed by the u64 gate id and
    the u32 row index.
    """
    parts = [_as_bytes(l, "<u4") for l in labels]
    parts.append(_as_bytes(gate_ids.reshape(-1, 1), "<u8"))
    parts.append(_as_bytes(rows.reshape(-1, 1), "<u4"))
    return _hash_rows(np.concatenate(parts, axis=1), words)


class GarblingContext:
    """Deterministic garbler state: offsets, randomness and gate-id sequence.

    Identical ``seed`` and call sequence reproduce identical tables.
    """

    def __init__(self, seed: bytes, lam: int = 128, row_reduction: bool = True):
        if not seed:
            raise OutOfRange("seed must be non-empty")
        if not 16 <= lam <= 128:
            raise OutOfRange(f"security parameter {lam} outside [16, 128]")
        if isinstance(seed, str):
            seed = seed.encode()
        self.lam = lam
        self.row_reduction = row_reduction
        self.next_gate = 0
        self._key = hashlib.sha256(b"redash-ctx" + seed).digest()
        self._draws = 0
        self._offsets: dict[int, np.ndarray] = {}

    def n(self, p: int) -> int:
        return component_count(p, self.lam)

    def offset(self, p: int) -> np.ndarray:
        R = self._offsets.get(p)
        if R is None:
            n = self.n(p)
            raw = hashlib.shake_256(self._key + b"offset" + p.to_bytes(8, "little")).digest(8 * n)
            R = (np.frombuffer(raw, dtype="<u8") % np.uint64(p)).astype(np.int64)
            R[0] = 1  # unit color component: distinct values get distinct labels
            R.flags.writeable = False
            self._offsets[p] = R
        return R

    def random_labels(self, p: int, count: int) -> np.ndarray:
        n = self.n(p)
        self._draws += 1
        raw = hashlib.shake_256(self._key + b"labels" + self._draws.to_bytes(8, "little")).digest(8 * n * count)
        return (np.frombuffer(raw, dtype="<u8") % np.uint64(p)).astype(np.int64).reshape(count, n)

    def take_gates(self, count: int) -> int:
        start = self.next_gate
        self.next_gate += count
        return start


@dataclass
class TableBlock:
    """Ciphertexts of ``count`` gates of one kind sharing moduli and function shape.

    ``rows`` is ``(count, nrows, n_out + 1)`` uint32; the extra word is a zero
    integrity tag.  Gate ``w`` of the block has id ``gate_id + w``.  A
    row-reduced projection omits the color-0 row.
    """

    kind: int
    gate_id: int
    in_moduli: tuple[int, ...]
    out_modulus: int
    rows: np.ndarray
    reduced: bool = False

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def ciphertexts(self) -> int:
        return self.rows.shape[0] * self.rows.shape[1]

    @property
    def out_components(self) -> int:
        return self.rows.shape[2] - 1


# a single-gate block is what the literature calls a projection table / garbled truth table
ProjectionTable = TableBlock
LookupTable2 = TableBlock


def _seal(out_labels: np.ndarray, pads: np.ndarray) -> np.ndarray:
    plain = np.zeros(pads.shape, dtype=np.uint32)
    plain[..., :-1] = out_labels
    return plain ^ pads


def _open(rows: np.ndarray, pads: np.ndarray, q: int) -> np.ndarray:
    plain = rows ^ pads
    if np.any(plain[:, -1] != 0) or np.any(plain[:, :-1] >= q):
        raise AuthFailure("ciphertext failed to authenticate")
    return plain[:, :-1].astype(np.int64)


def garble_proj(ctx: GarblingContext, zero_in: np.ndarray, p: int, q: int,
                phi: np.ndarray) -> tuple[TableBlock, np.ndarray]:
    """Garble ``W`` projection gates ``Z_p -> Z_q``.

    ``phi`` is a length-``p`` lookup (shared by all gates) or a ``(W, p)``
    matrix.  Returns the table block and the output zero labels.
    """
    W, n_in = zero_in.shape
    R_in, R_out, n_out = ctx.offset(p), ctx.offset(q), ctx.n(q)
    phi = np.asarray(phi, dtype=np.int64) % q
    gid = ctx.take_gates(W)
    colors = np.arange(p, dtype=np.int64)
    values = (colors[None, :] - zero_in[:, :1]) % p                        # (W, p)
    labels = (zero_in[:, None, :] + values[..., None] * R_in) % p          # (W, p, n_in)
    gids = np.repeat(np.arange(gid, gid + W, dtype=np.uint64), p)
    pads = prf([labels.reshape(W * p, n_in)], gids, np.tile(colors, W), n_out + 1)
    pads = pads.reshape(W, p, n_out + 1)
    out_vals = phi[values] if phi.ndim == 1 else np.take_along_axis(phi, values, axis=1)
    reduce = ctx.row_reduction
    if reduce:
        # the color-0 row's output label is the pad itself, so it need not be sent
        zero_out = (pads[:, 0, :n_out].astype(np.int64) % q - out_vals[:, :1] * R_out) % q
    else:
        zero_out = ctx.random_labels(q, W)
    out_labels = (zero_out[:, None, :] + out_vals[..., None] * R_out) % q
    rows = _seal(out_labels, pads)
    if reduce:
        rows = rows[:, 1:, :]
    return TableBlock(PROJ, gid, (p,), q, np.ascontiguousarray(rows), reduce), zero_out


def eval_proj(block: TableBlock, labels: np.ndarray) -> np.ndarray:
    (p,), q = block.in_moduli, block.out_modulus
    W = labels.shape[0]
    if W != block.count:
        raise CircuitMismatch(f"projection block of {block.count} gates fed {W} labels")
    n_out = block.out_components
    colors = labels[:, 0]
    gids = np.arange(block.gate_id, block.gate_id + W, dtype=np.uint64)
    pads = prf([labels], gids, colors, n_out + 1)
    idx = np.arange(W)
    if not block.reduced:
        return _open(block.rows[idx, colors], pads, q)
    out = np.empty((W, n_out), dtype=np.int64)
    zero = colors == 0
    out[zero] = pads[zero, :n_out].astype(np.int64) % q
    nz = ~zero
    if nz.any():
        out[nz] = _open(block.rows[idx[nz], colors[nz] - 1], pads[nz], q)
    return out


def garble_lookup(ctx: GarblingContext, zero_x: np.ndarray, p: int, zero_y: np.ndarray, q: int,
                  m: int, psi: np.ndarray) -> tuple[TableBlock, np.ndarray]:
    """Garble ``W`` two-input gates ``Z_p x Z_q -> Z_m`` given as a ``(p, q)`` table."""
    W, nx = zero_x.shape
    ny = zero_y.shape[1]
    Rx, Ry, Rm, n_out = ctx.offset(p), ctx.offset(q), ctx.offset(m), ctx.n(m)
    psi = np.asarray(psi, dtype=np.int64) % m
    gid = ctx.take_gates(W)
    cx = np.arange(p, dtype=np.int64)
    cy = np.arange(q, dtype=np.int64)
    a = (cx[None, :] - zero_x[:, :1]) % p                                   # (W, p)
    b = (cy[None, :] - zero_y[:, :1]) % q                                   # (W, q)
    lx = (zero_x[:, None, :] + a[..., None] * Rx) % p                      # (W, p, nx)
    ly = (zero_y[:, None, :] + b[..., None] * Ry) % q                      # (W, q, ny)
    lx_all = np.broadcast_to(lx[:, :, None, :], (W, p, q, nx)).reshape(-1, nx)
    ly_all = np.broadcast_to(ly[:, None, :, :], (W, p, q, ny)).reshape(-1, ny)
    row_ids = np.tile(np.arange(p * q, dtype=np.int64), W)
    gids = np.repeat(np.arange(gid, gid + W, dtype=np.uint64), p * q)
    pads = prf([lx_all, ly_all], gids, row_ids, n_out + 1).reshape(W, p * q, n_out + 1)
    out_vals = psi[a[:, :, None], b[:, None, :]].reshape(W, p * q)
    zero_out = ctx.random_labels(m, W)
    out_labels = (zero_out[:, None, :] + out_vals[..., None] * Rm) % m
    rows = _seal(out_labels, pads)
    return TableBlock(LOOKUP2, gid, (p, q), m, rows), zero_out


def eval_lookup(block: TableBlock, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    p, q = block.in_moduli
    W = lx.shape[0]
    if W != block.count or ly.shape[0] != W:
        raise CircuitMismatch(f"lookup block of {block.count} gates fed {W} labels")
    rows = lx[:, 0] * q + ly[:, 0]
    gids = np.arange(block.gate_id, block.gate_id + W, dtype=np.uint64)
    pads = prf([lx, ly], gids, rows, block.out_components + 1)
    return _open(block.rows[np.arange(W), rows], pads, block.out_modulus)


# -- single-wire API ------------------------------------------------------------

@dataclass(frozen=True)
class Label:
    modulus: int
    components: tuple[int, ...]

    def array(self) -> np.ndarray:
        return np.asarray(self.components, dtype=np.int64)

    @classmethod
    def of(cls, p: int, arr) -> "Label":
        return cls(p, tuple(int(v) for v in np.asarray(arr).reshape(-1)))


@dataclass(frozen=True)
class WireSecrets:
    base_label: Label
    offset: Label

    @property
    def modulus(self) -> int:
        return self.base_label.modulus


def new_context(seed: bytes, lam: int = 128, base=None, row_reduction: bool = True) -> GarblingContext:
    ctx = GarblingContext(seed, lam, row_reduction)
    if base is not None:
        for p in base.moduli:
            ctx.offset(p)
    return ctx


def fresh_wire(ctx: GarblingContext, p: int) -> WireSecrets:
    return WireSecrets(Label.of(p, ctx.random_labels(p, 1)), Label.of(p, ctx.offset(p)))


def encode(value: int, secrets: WireSecrets) -> Label:
    p = secrets.modulus
    if not 0 <= value < p:
        raise OutOfRange(f"{value} not in Z_{p}")
    return Label.of(p, (secrets.base_label.array() + value * secrets.offset.array()) % p)


def decode(label: Label, secrets: WireSecrets) -> int:
    p = secrets.modulus
    l0, R = secrets.base_label.array(), secrets.offset.array()
    v = int((label.array()[0] - l0[0]) % p)
    if not np.array_equal((l0 + v * R) % p, label.array()):
        raise AuthFailure("label is not a valid encoding on this wire")
    return v


def add_labels(x: Label, y: Label) -> Label:
    if x.modulus != y.modulus or len(x.components) != len(y.components):
        raise ModulusMismatch(f"cannot add labels mod {x.modulus} and mod {y.modulus}")
    return Label.of(x.modulus, (x.array() + y.array()) % x.modulus)


def cmul(x: Label, c: int) -> Label:
    return Label.of(x.modulus, (x.array() * (c % x.modulus)) % x.modulus)


def cadd(wire: WireSecrets, c: int) -> WireSecrets:
    """Add a public constant at garble time by re-basing the zero label.

    A label ``l0 + a*R`` reads as value ``a + c`` against ``l0 - c*R``; the
    evaluator does nothing.
    """
    p = wire.modulus
    l0 = (wire.base_label.array() - (c % p) * wire.offset.array()) % p
    return WireSecrets(Label.of(p, l0), wire.offset)


def secrets_after_add(x: WireSecrets, y: WireSecrets) -> WireSecrets:
    return WireSecrets(add_labels(x.base_label, y.base_label), x.offset)


def secrets_after_cmul(x: WireSecrets, c: int) -> WireSecrets:
    return WireSecrets(cmul(x.base_label, c), x.offset)


def garble_projection(phi: Callable[[int], int], in_wire: WireSecrets, q: int,
                      ctx: GarblingContext) -> tuple[TableBlock, WireSecrets]:
    p = in_wire.modulus
    table = np.array([phi(a) for a in range(p)], dtype=np.int64)
    block, zero_out = garble_proj(ctx, in_wire.base_label.array()[None, :], p, q, table)
    return block, WireSecrets(Label.of(q, zero_out), Label.of(q, ctx.offset(q)))


def eval_projection(table: TableBlock, x: Label) -> Label:
    if x.modulus != table.in_moduli[0]:
        raise ModulusMismatch(f"label mod {x.modulus} on a mod-{table.in_moduli[0]} gate")
    return Label.of(table.out_modulus, eval_proj(table, x.array()[None, :]))


def garble_lookup2(psi: Callable[[int, int], int], x_wire: WireSecrets, y_wire: WireSecrets, m: int,
                   ctx: GarblingContext) -> tuple[TableBlock, WireSecrets]:
    p, q = x_wire.modulus, y_wire.modulus
    table = np.array([[psi(a, b) for b in range(q)] for a in range(p)], dtype=np.int64)
    block, zero_out = garble_lookup(ctx, x_wire.base_label.array()[None, :], p,
                                    y_wire.base_label.array()[None, :], q, m, table)
    return block, WireSecrets(Label.of(m, zero_out), Label.of(m, ctx.offset(m)))


def eval_lookup2(table: TableBlock, x: Label, y: Label) -> Label:
    if (x.modulus, y.modulus) != table.in_moduli:
        raise ModulusMismatch("label moduli do not match the gate")
    return Label.of(table.out_modulus, eval_lookup(table, x.array()[None, :], y.array()[None, :]))


# -- batched circuit backends ---------------------------------------------------

class Bundle:
    """Many wires of one modulus: garbler zero labels or evaluator labels, ``(W, n)``."""

    __slots__ = ("modulus", "data")

    def __init__(self, modulus: int, data: np.ndarray):
        self.modulus = modulus
        self.data = data

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, idx) -> "Bundle":
        return Bundle(self.modulus, self.data[idx])


def _check(a: Bundle, b: Bundle):
    if a.modulus != b.modulus:
        raise ModulusMismatch(f"mod {a.modulus} wire combined with mod {b.modulus} wire")


def matmul_mod(matrix: np.ndarray, data: np.ndarray, p: int) -> np.ndarray:
    """``matrix @ data mod p`` exactly, for entries already reduced into ``[0, p)``.

    Uses float64 BLAS when every dot product stays below 2**53 and blocked
    int64 accumulation otherwise, with one reduction per block.
    """
    inner = matrix.shape[1]
    if inner == 0:
        return np.zeros((matrix.shape[0],) + data.shape[1:], dtype=np.int64)
    bound = inner * (p - 1) ** 2
    flat = data.reshape(inner, -1)
    if bound < 1 << 53:
        out = np.rint(matrix.astype(np.float64) @ flat.astype(np.float64)).astype(np.int64) % p
    else:
        block = max(1, ((1 << 63) - 1) // max(1, (p - 1) ** 2) - 1)
        out = np.zeros((matrix.shape[0], flat.shape[1]), dtype=np.int64)
        for start in range(0, inner, block):
            out = (out + matrix[:, start:start + block] @ flat[start:start + block]) % p
    return out.reshape((matrix.shape[0],) + data.shape[1:])


class Backend:
    """Free label arithmetic, identical for garbler zero labels and evaluator labels."""

    lam: int

    def n(self, p: int) -> int:
        return component_count(p, self.lam)

    def add(self, a: Bundle, b: Bundle) -> Bundle:
        _check(a, b)
        return Bundle(a.modulus, (a.data + b.data) % a.modulus)

    def sub(self, a: Bundle, b: Bundle) -> Bundle:
        _check(a, b)
        return Bundle(a.modulus, (a.data - b.data) % a.modulus)

    def cmul(self, a: Bundle, c) -> Bundle:
        """Multiply by a public constant (scalar or one per wire)."""
        p = a.modulus
        c = np.asarray(c, dtype=np.int64) % p
        if c.ndim:
            c = c[:, None]
        return Bundle(p, (a.data * c) % p)

    def linear(self, a: Bundle, matrix: np.ndarray) -> Bundle:
        """Wire-wise public linear map ``out_i = sum_j M_ij * in_j``."""
        p = a.modulus
        m = np.asarray(matrix, dtype=np.int64) % p
        return Bundle(p, matmul_mod(m, a.data, p))

    def concat(self, parts: Sequence[Bundle]) -> Bundle:
        for b in parts[1:]:
            _check(parts[0], b)
        return Bundle(parts[0].modulus, np.concatenate([b.data for b in parts], axis=0))

    def gather(self, a: Bundle, index: np.ndarray) -> Bundle:
        """Rearrange wires; index ``-1`` selects the constant-zero wire."""
        padded = np.concatenate([a.data, self.constant(a.modulus, 1, 0).data], axis=0)
        return Bundle(a.modulus, padded[index])


class GarblerBackend(Backend):
    def __init__(self, ctx: GarblingContext):
        self.ctx = ctx
        self.lam = ctx.lam
        self.tables: list[TableBlock] = []

    def inputs(self, p: int, count: int) -> Bundle:
        return Bundle(p, self.ctx.random_labels(p, count))

    def constant(self, p: int, count: int, value: int = 0) -> Bundle:
        R = self.ctx.offset(p)
        return Bundle(p, np.broadcast_to((-(value % p) * R) % p, (count, R.size)).copy())

    def cadd(self, a: Bundle, c) -> Bundle:
        p = a.modulus
        c = np.asarray(c, dtype=np.int64) % p
        if c.ndim:
            c = c[:, None]
        return Bundle(p, (a.data - c * self.ctx.offset(p)) % p)

    def proj(self, a: Bundle, q: int, phi) -> Bundle:
        block, zero = garble_proj(self.ctx, a.data, a.modulus, q, phi)
        self.tables.append(block)
        return Bundle(q, zero)

    def lookup2(self, a: Bundle, b: Bundle, m: int, psi) -> Bundle:
        block, zero = garble_lookup(self.ctx, a.data, a.modulus, b.data, b.modulus, m, psi)
        self.tables.append(block)
        return Bundle(m, zero)

    def encode(self, zero: Bundle, values) -> np.ndarray:
        p = zero.modulus
        v = np.asarray(values, dtype=np.int64) % p
        return (zero.data + v[:, None] * self.ctx.offset(p)) % p

    def decode(self, zero: Bundle, labels: np.ndarray) -> np.ndarray:
        return decode_batch(zero.data, labels, self.ctx.offset(zero.modulus), zero.modulus)


def decode_batch(zero: np.ndarray, labels: np.ndarray, R: np.ndarray, p: int) -> np.ndarray:
    """Values carried by ``labels`` against the zero labels; rejects forged labels."""
    labels = np.asarray(labels, dtype=np.int64)
    values = (labels[:, 0] - zero[:, 0]) % p
    if not np.array_equal((zero + values[:, None] * R) % p, labels):
        raise AuthFailure("output label does not decode on its wire")
    return values


class EvaluatorBackend(Backend):
    def __init__(self, tables: Sequence[TableBlock], lam: int):
        self.lam = lam
        self._tables = list(tables)
        self._next = 0

    @property
    def exhausted(self) -> bool:
        return self._next == len(self._tables)

    def _pop(self, kind, in_moduli, out_modulus, count) -> TableBlock:
        if self._next >= len(self._tables):
            raise CircuitMismatch("ran out of garbled tables")
        block = self._tables[self._next]
        self._next += 1
        if (block.kind, block.in_moduli, block.out_modulus, block.count) != (kind, in_moduli, out_modulus, count):
            raise CircuitMismatch(
                f"expected {KIND_NAMES[kind]} {in_moduli}->{out_modulus} x{count}, got "
                f"{KIND_NAMES.get(block.kind, block.kind)} {block.in_moduli}->{block.out_modulus} x{block.count}")
        return block

    def constant(self, p: int, count: int, value: int = 0) -> Bundle:
        return Bundle(p, np.zeros((count, self.n(p)), dtype=np.int64))

    def cadd(self, a: Bundle, c) -> Bundle:
        return a

    def proj(self, a: Bundle, q: int, phi) -> Bundle:
        block = self._pop(PROJ, (a.modulus,), q, len(a))
        return Bundle(q, eval_proj(block, a.data))

    def lookup2(self, a: Bundle, b: Bundle, m: int, psi) -> Bundle:
        block = self._pop(LOOKUP2, (a.modulus, b.modulus), m, len(a))
        return Bundle(m, eval_lookup(block, a.data, b.data))
