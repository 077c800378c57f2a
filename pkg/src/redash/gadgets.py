"""Composite garbled gadgets over RNS-encoded values.

Circuit functions take a backend (garbler or evaluator) and a mapping
``modulus -> Bundle`` holding one residue plane per base modulus.  Because
both parties run the same function, the evaluator consumes tables in exactly
the order the garbler produced them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .engine import Backend, Bundle, EvaluatorBackend, GarblerBackend, GarblingContext, TableBlock
from .errors import CircuitMismatch
from .rns import RnsBase, scale_moduli

Planes = dict[int, Bundle]


def switch_modulus(bk: Backend, d: Bundle, q: int) -> Bundle:
    """Project a digit ``v < p`` onto a mod-``q`` wire carrying ``v mod q``."""
    return bk.proj(d, q, np.arange(d.modulus) % q)


def extend_circuit(bk: Backend, sources: Mapping[int, Bundle], targets: Sequence[int]) -> Planes:
    """Base extension from ``sources`` to each modulus in ``targets``.

    The value must be below the product of the source moduli.  Digits are
    peeled off in ascending modulus order; every digit is projected only into
    the moduli that still need it (later sources and the targets), which is
    the pruned circuit.  Each target starts as a constant-zero wire.
    """
    order = sorted(sources)
    z = dict(sources)
    width = len(z[order[0]])
    zt = {t: bk.constant(t, width, 0) for t in targets}
    for i, m in enumerate(order):
        d = z[m]
        for r in order[i + 1:]:
            z[r] = bk.cmul(bk.sub(z[r], switch_modulus(bk, d, r)), pow(m, -1, r))
        for t in targets:
            zt[t] = bk.cmul(bk.sub(zt[t], switch_modulus(bk, d, t)), pow(m, -1, t))
    p_src = math.prod(order)
    return {t: bk.cmul(zt[t], -p_src % t) for t in targets}


def mrs_digits(bk: Backend, x: Mapping[int, Bundle], order: Sequence[int]) -> list[Bundle]:
    """Mixed-radix digits of ``x`` with radices ``order`` (least significant first)."""
    z = {m: x[m] for m in order}
    digits = []
    for i, m in enumerate(order):
        d = z[m]
        digits.append(d)
        for r in order[i + 1:]:
            z[r] = bk.cmul(bk.sub(z[r], switch_modulus(bk, d, r)), pow(m, -1, r))
    return digits


def scale_circuit(bk: Backend, base: RnsBase, x: Mapping[int, Bundle], s: int,
                  probes: dict | None = None) -> Planes:
    """Signed scaling by ``s`` (one modulus or a product of distinct moduli).

    ShiftUp by ``floor(P/2)`` at garble time, exact division by each dropped
    modulus on every remaining residue, base extension back to the dropped
    moduli, ShiftDown by ``floor(P/(2s))``.
    """
    dropped = scale_moduli(s, base)
    P = base.product
    cur = {m: bk.cadd(x[m], base.half % m) for m in base.moduli}
    if probes is not None:
        probes["x_up"] = dict(cur)
    for m in sorted(dropped):
        xm = cur.pop(m)
        for r in list(cur):
            cur[r] = bk.cmul(bk.sub(cur[r], switch_modulus(bk, xm, r)), pow(m, -1, r))
    if probes is not None:
        probes["y_prime"] = dict(cur)
    ext = extend_circuit(bk, cur, dropped)
    y = {m: cur[m] if m in cur else ext[m] for m in base.moduli}
    if probes is not None:
        probes["y"] = dict(y)
    shift = P // (2 * s)
    return {m: bk.cadd(y[m], -shift % m) for m in base.moduli}


def sign_order(base: RnsBase) -> list[int]:
    """Digit order for the sign test: an even modulus, if any, goes last.

    With an even most significant radix ``ceil(P/2)`` has a single non-zero
    digit, so only one digit needs comparing.
    """
    evens = [m for m in base.moduli if m % 2 == 0]
    if not evens:
        return sorted(base.moduli)
    return sorted(m for m in base.moduli if m != evens[0]) + [evens[0]]


def _threshold_digits(base: RnsBase, order: Sequence[int]) -> list[int]:
    t = (base.product + 1) // 2
    digits = []
    for m in order:
        digits.append(t % m)
        t //= m
    return digits


LT, EQ, GT = 0, 1, 2
# combine (more significant state, less significant state)
_COMBINE = np.array([[a if a != EQ else b for b in range(3)] for a in range(3)], dtype=np.int64)


def sign_circuit(bk: Backend, base: RnsBase, x: Mapping[int, Bundle]) -> Bundle:
    """Mod-2 wire carrying 1 iff the signed value of ``x`` is non-negative.

    Exact test ``encoded < ceil(P/2)`` by comparing mixed-radix digits against
    the threshold's digits, most significant first.  Trailing zero threshold
    digits cannot affect the outcome and are skipped.
    """
    order = sign_order(base)
    digits = mrs_digits(bk, x, order)
    tdig = _threshold_digits(base, order)
    first = next(i for i, t in enumerate(tdig) if t)
    relevant = list(range(first, len(order)))
    if len(relevant) == 1:
        i = relevant[0]
        return bk.proj(digits[i], 2, (np.arange(order[i]) < tdig[i]).astype(np.int64))
    states = []
    for i in relevant:
        v = np.arange(order[i])
        states.append(bk.proj(digits[i], 3, np.where(v < tdig[i], LT, np.where(v == tdig[i], EQ, GT))))
    acc = states[-1]
    for st in reversed(states[:-1]):
        acc = bk.lookup2(acc, st, 3, _COMBINE)
    return bk.proj(acc, 2, np.array([1, 0, 0]))


def relu_circuit(bk: Backend, base: RnsBase, x: Mapping[int, Bundle]) -> Planes:
    b = sign_circuit(bk, base, x)
    out = {}
    for m in base.moduli:
        select = np.outer(np.arange(2), np.arange(m))
        out[m] = bk.lookup2(b, x[m], m, select)
    return out


# -- standalone gadgets -----------------------------------------------------------

@dataclass(frozen=True)
class ScalingSpec:
    base: RnsBase
    s: int
    s_moduli: tuple[int, ...]
    shift_up: int
    shift_down: int


def make_scaling_spec(base: RnsBase, s: int) -> ScalingSpec:
    return ScalingSpec(base, s, scale_moduli(s, base), base.half, base.product // (2 * s))


@dataclass
class GadgetSecrets:
    inputs: dict[int, np.ndarray]
    outputs: dict[int, np.ndarray]
    offsets: dict[int, np.ndarray]
    probes: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)


@dataclass
class GarbledGadget:
    """Tables and wiring of ``count`` parallel instances of one gadget.

    ``secrets`` is garbler-only state (zero labels); strip it before handing
    the gadget to an evaluator.
    """

    kind: str
    base: RnsBase
    params: dict
    count: int
    lam: int
    tables: list[TableBlock]
    in_moduli: tuple[int, ...]
    out_moduli: tuple[int, ...]
    secrets: GadgetSecrets | None = None

    @property
    def ciphertext_count(self) -> int:
        return sum(t.ciphertexts for t in self.tables)


def _wiring(kind: str, base: RnsBase, params: dict) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if kind == "BaseExtension":
        t = base.moduli[params["target"]]
        return tuple(m for m in base.moduli if m != t), (t,)
    if kind == "Sign":
        return base.moduli, (2,)
    return base.moduli, base.moduli


def _circuit(kind: str, bk: Backend, base: RnsBase, params: dict, x: Planes, probes) -> Planes:
    if kind == "BaseExtension":
        return extend_circuit(bk, x, [base.moduli[params["target"]]])
    if kind == "Scaling":
        out = x
        for step in params["steps"]:
            out = scale_circuit(bk, base, out, step, probes)
        return out
    if kind == "Sign":
        return {2: sign_circuit(bk, base, x)}
    if kind == "ReLU":
        return relu_circuit(bk, base, x)
    raise ValueError(f"unknown gadget kind {kind}")


def _garble(kind: str, base: RnsBase, ctx: GarblingContext, count: int, params: dict,
            probes: bool) -> GarbledGadget:
    bk = GarblerBackend(ctx)
    ins, outs = _wiring(kind, base, params)
    x = {m: bk.inputs(m, count) for m in ins}
    probe_map = {} if probes else None
    y = _circuit(kind, bk, base, params, x, probe_map)
    secrets = GadgetSecrets(
        inputs={m: b.data for m, b in x.items()},
        outputs={m: y[m].data for m in outs},
        offsets={m: ctx.offset(m) for m in set(ins) | set(outs)},
        probes={k: {m: b.data for m, b in v.items()} for k, v in (probe_map or {}).items()},
    )
    return GarbledGadget(kind, base, dict(params), count, ctx.lam, bk.tables, ins, outs, secrets)


def garble_base_extension(base: RnsBase, target: int, ctx: GarblingContext, count: int = 1) -> GarbledGadget:
    return _garble("BaseExtension", base, ctx, count, {"target": target % len(base)}, False)


def garble_scaling(spec: ScalingSpec, ctx: GarblingContext, count: int = 1, probes: bool = False) -> GarbledGadget:
    return _garble("Scaling", spec.base, ctx, count, {"steps": (spec.s,)}, probes)


def garble_scaling_chain(base: RnsBase, steps: Sequence[int], ctx: GarblingContext, count: int = 1) -> GarbledGadget:
    """Successive single gadgets, e.g. ``(2,) * ell`` to emulate power-of-two chaining."""
    for s in steps:
        scale_moduli(s, base)
    return _garble("Scaling", base, ctx, count, {"steps": tuple(steps)}, False)


def garble_sign(base: RnsBase, ctx: GarblingContext, count: int = 1) -> GarbledGadget:
    return _garble("Sign", base, ctx, count, {}, False)


def garble_relu(base: RnsBase, ctx: GarblingContext, count: int = 1) -> GarbledGadget:
    return _garble("ReLU", base, ctx, count, {}, False)


def evaluate_gadget(gadget: GarbledGadget, labels: Mapping[int, np.ndarray],
                    probes: dict | None = None) -> dict[int, np.ndarray]:
    bk = EvaluatorBackend(gadget.tables, gadget.lam)
    x = {m: Bundle(m, np.asarray(labels[m], dtype=np.int64)) for m in gadget.in_moduli}
    probe_map = {} if probes is not None else None
    y = _circuit(gadget.kind, bk, gadget.base, gadget.params, x, probe_map)
    if not bk.exhausted:
        raise CircuitMismatch("garbled gadget has unused tables")
    if probes is not None:
        probes.update({k: {m: b.data for m, b in v.items()} for k, v in probe_map.items()})
    return {m: y[m].data for m in gadget.out_moduli}


def encode_planes(zero: Mapping[int, np.ndarray], offsets: Mapping[int, np.ndarray],
                  values: np.ndarray) -> dict[int, np.ndarray]:
    """Labels for integer ``values`` reduced onto each plane's modulus."""
    values = np.asarray(values, dtype=np.int64)
    return {m: (z + (values % m)[:, None] * offsets[m]) % m for m, z in zero.items()}


def decode_planes(zero: Mapping[int, np.ndarray], offsets: Mapping[int, np.ndarray],
                  labels: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    from .engine import decode_batch
    return {m: decode_batch(zero[m], labels[m], offsets[m], m) for m in zero}


def crt_planes(base: RnsBase, residues: Mapping[int, np.ndarray]) -> np.ndarray:
    """Recombine per-modulus residue arrays into values of ``Z_P`` (Garner, vectorised)."""
    dtype = np.int64 if base.product < 1 << 62 else object
    z = [np.asarray(residues[m]).astype(dtype) for m in base.moduli]
    value = np.zeros_like(z[0])
    weight = 1
    for i, m in enumerate(base.moduli):
        d = z[i]
        value = value + d * weight
        weight *= m
        for j in range(i + 1, len(base)):
            pj = base.moduli[j]
            z[j] = (z[j] - d % pj) * base.inverses[(j, i)] % pj
    return value
