"""Plaintext residue number system and mixed-radix arithmetic.

Everything here works on Python integers and is the ground truth the garbled
constructions are checked against.  Residues of a value ``x`` over a base
``(p_1, ..., p_k)`` are ``x mod p_i``; the associated mixed-radix system uses
the moduli themselves as radices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidScaleFactor, ModulusTooSmall, NonCoprime, OutOfRange


@dataclass(frozen=True)
class RnsBase:
    """Ordered pairwise-coprime moduli with precomputed constants.

    ``inverses[(i, j)]`` holds ``p_j^{-1} mod p_i`` for every ``i != j``.
    """

    moduli: tuple[int, ...]
    product: int = field(init=False)
    partial_products: tuple[int, ...] = field(init=False)
    inverses: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        moduli = tuple(int(p) for p in self.moduli)
        if not moduli:
            raise ModulusTooSmall("empty base")
        for p in moduli:
            if p < 2:
                raise ModulusTooSmall(f"modulus {p} < 2")
        for i in range(len(moduli)):
            for j in range(i + 1, len(moduli)):
                g = math.gcd(moduli[i], moduli[j])
                if g != 1:
                    raise NonCoprime(f"moduli {moduli[i]} and {moduli[j]} share factor {g}")
        partial, acc = [], 1
        for p in moduli:
            acc *= p
            partial.append(acc)
        inverses = {}
        for i, pi in enumerate(moduli):
            for j, pj in enumerate(moduli):
                if i != j:
                    inverses[(i, j)] = pow(pj, -1, pi)
        object.__setattr__(self, "moduli", moduli)
        object.__setattr__(self, "product", acc)
        object.__setattr__(self, "partial_products", tuple(partial))
        object.__setattr__(self, "inverses", inverses)

    def __len__(self):
        return len(self.moduli)

    def __iter__(self):
        return iter(self.moduli)

    def __str__(self):
        return ",".join(str(p) for p in self.moduli)

    def index(self, modulus: int) -> int:
        return self.moduli.index(modulus)

    @property
    def half(self) -> int:
        """Shift-up amount ``floor(P/2)``; the first negative encoding is ``ceil(P/2)``."""
        return self.product // 2


def make_base(moduli: Iterable[int]) -> RnsBase:
    return RnsBase(tuple(moduli))


def parse_base(text: str) -> RnsBase:
    """Parse a comma separated modulus list such as ``"32,167,173"``."""
    try:
        moduli = [int(tok) for tok in text.replace(" ", "").split(",") if tok]
    except ValueError as exc:
        raise ModulusTooSmall(f"bad base specification {text!r}") from exc
    return make_base(moduli)


@dataclass(frozen=True)
class ResidueVector:
    base: RnsBase
    residues: tuple[int, ...]

    def __post_init__(self):
        if len(self.residues) != len(self.base):
            raise OutOfRange("residue count does not match base length")
        for r, p in zip(self.residues, self.base.moduli):
            if not 0 <= r < p:
                raise OutOfRange(f"residue {r} not reduced mod {p}")


@dataclass(frozen=True)
class MrsDigits:
    base: RnsBase
    digits: tuple[int, ...]

    def value(self) -> int:
        x, weight = 0, 1
        for d, p in zip(self.digits, self.base.moduli):
            x += d * weight
            weight *= p
        return x


@dataclass(frozen=True)
class SignedValue:
    """A signed integer living in ``Z_P`` under the half-split encoding.

    Encodings ``0 .. ceil(P/2)-1`` are non-negative, the rest are negative, so
    the representable range is ``[-floor(P/2), ceil(P/2) - 1]``.
    """

    value: int
    base: RnsBase

    def __post_init__(self):
        lo, hi = signed_range(self.base.product)
        if not lo <= self.value <= hi:
            raise OutOfRange(f"{self.value} outside signed range [{lo}, {hi}]")

    @property
    def encoded(self) -> int:
        return self.value % self.base.product

    @classmethod
    def from_encoded(cls, e: int, base: RnsBase) -> "SignedValue":
        return cls(decode_signed(e, base.product), base)


def signed_range(product: int) -> tuple[int, int]:
    return -(product // 2), (product + 1) // 2 - 1


def encode_signed(v: int, product: int) -> int:
    lo, hi = signed_range(product)
    if not lo <= v <= hi:
        raise OutOfRange(f"{v} outside signed range [{lo}, {hi}]")
    return v % product


def decode_signed(e: int, product: int) -> int:
    return e if e < (product + 1) // 2 else e - product


def to_residues(x: int, base: RnsBase) -> ResidueVector:
    if not 0 <= x < base.product:
        raise OutOfRange(f"{x} not in [0, {base.product})")
    return ResidueVector(base, tuple(x % p for p in base.moduli))


def to_mrs(r: ResidueVector) -> MrsDigits:
    """RNS to associated-MRS conversion by the recursive digit peeling.

    ``z`` starts as the residues; each round takes the current digit
    ``d_i = z_i`` and replaces every later residue by
    ``(z_j - d_i) * p_i^{-1} mod p_j``.
    """
    moduli = r.base.moduli
    z = list(r.residues)
    digits = []
    for i, pi in enumerate(moduli):
        d = z[i]
        digits.append(d)
        for j in range(i + 1, len(moduli)):
            z[j] = (z[j] - d) * r.base.inverses[(j, i)] % moduli[j]
    return MrsDigits(r.base, tuple(digits))


def from_residues(r: ResidueVector) -> int:
    # Garner: reconstruct through the mixed-radix digits
    return to_mrs(r).value()


def _extend(residues: Sequence[int], sources: Sequence[int], target: int) -> int:
    """Residue mod ``target`` of the unique ``y < prod(sources)`` with the given residues.

    Runs the digit recursion with a zero placeholder in the target slot; once
    every source digit has been peeled off the placeholder holds
    ``-y * prod(sources)^{-1}``, so multiplying by ``-prod(sources)`` recovers
    ``[y]_target``.
    """
    z = list(residues)
    zt = 0
    for i, pi in enumerate(sources):
        d = z[i]
        for j in range(i + 1, len(sources)):
            z[j] = (z[j] - d) * pow(pi, -1, sources[j]) % sources[j]
        zt = (zt - d) * pow(pi, -1, target) % target
    return -math.prod(sources) * zt % target


def base_extend(residues: Sequence[int], base: RnsBase, target: int = -1) -> int:
    """Recover the residue at position ``target`` from the residues at all other positions.

    The represented value must be smaller than the product of the other moduli
    (always true right after scaling by the target modulus).
    """
    k = len(base)
    target %= k
    sources = [p for i, p in enumerate(base.moduli) if i != target]
    if len(residues) != len(sources):
        raise OutOfRange(f"expected {len(sources)} residues, got {len(residues)}")
    for r, p in zip(residues, sources):
        if not 0 <= r < p:
            raise OutOfRange(f"residue {r} not reduced mod {p}")
    return _extend(residues, sources, base.moduli[target])


def scale_moduli(s: int, base: RnsBase) -> tuple[int, ...]:
    """Split ``s`` into the distinct base moduli whose product it is.

    At least one modulus has to survive the scaling, so ``s`` may not be the
    whole product.
    """
    if s < 2:
        raise InvalidScaleFactor(f"scale factor {s} < 2")
    picked = tuple(p for p in base.moduli if s % p == 0)
    if math.prod(picked) != s:
        raise InvalidScaleFactor(f"{s} is not a product of distinct moduli of ({base})")
    if len(picked) == len(base):
        raise InvalidScaleFactor(f"{s} consumes the whole base ({base})")
    return picked


@dataclass(frozen=True)
class ScaleTrace:
    """Every intermediate of the scaling pipeline for one encoded input."""

    x: int
    x_up: int
    y_prime: tuple[int, ...]   # residues after exact division, 0 in dropped slots
    y_prime_value: int
    y: int
    y_down: int


def scale_trace(e: int, s: int, base: RnsBase) -> ScaleTrace:
    """Run shift-up, per-residue exact division, base extension and shift-down.

    ``e`` is an encoded element of ``Z_P``.  Division works residue-wise:
    ``[x]_i <- ([x]_i - [x]_m) * m^{-1} mod p_i`` for each dropped modulus ``m``.
    """
    dropped = scale_moduli(s, base)
    P = base.product
    if not 0 <= e < P:
        raise OutOfRange(f"{e} not in [0, {P})")
    x_up = (e + base.half) % P
    res = {p: x_up % p for p in base.moduli}
    for m in sorted(dropped):
        rm = res.pop(m)
        for r in res:
            res[r] = (res[r] - rm % r) * pow(m, -1, r) % r
    sources = [p for p in base.moduli if p not in dropped]
    y_prime = tuple(res.get(p, 0) for p in base.moduli)
    y_prime_value = from_residues(ResidueVector(base, y_prime))
    full = dict(res)
    for m in dropped:
        full[m] = _extend([res[p] for p in sources], sources, m)
    y = from_residues(ResidueVector(base, tuple(full[p] for p in base.moduli)))
    y_down = (y - P // (2 * s)) % P
    return ScaleTrace(e, x_up, y_prime, y_prime_value, y, y_down)


def scale_signed_plain(x: int, s: int, base: RnsBase) -> int:
    """Signed result of the scaling gadget on the signed input ``x``.

    Equals ``floor(x / s)`` whenever ``2s`` divides ``P``; in general it is
    ``floor((x + (floor(P/2) mod s)) / s)`` because both shifts are floored.
    """
    e = encode_signed(x, base.product)
    return decode_signed(scale_trace(e, s, base).y_down, base.product)


def scale_encoded_array(e: np.ndarray, steps: Sequence[int], base: RnsBase) -> np.ndarray:
    """Vectorised scaling of encoded values, one gadget per entry of ``steps``."""
    P = base.product
    if P >= 1 << 62:
        raise OutOfRange("base product too large for int64 evaluation")
    out = np.asarray(e, dtype=np.int64) % P
    for s in steps:
        scale_moduli(s, base)
        out = ((out + base.half) % P // s - P // (2 * s)) % P
    return out


def first_primes(k: int) -> tuple[int, ...]:
    primes, n = [], 2
    while len(primes) < k:
        if all(n % q for q in primes if q * q <= n):
            primes.append(n)
        n += 1
    return tuple(primes)


def cpm_base(k: int, two_power: int = 1) -> RnsBase:
    """Base of the first ``k`` primes, optionally with 2 replaced by ``2**two_power``."""
    primes = list(first_primes(k))
    primes[0] = 2 ** two_power
    return make_base(primes)
