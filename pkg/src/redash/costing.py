"""Ciphertext accounting for base extension and scaling.

Counts are per gadget instance and independent of input values and of the
security parameter, so gadgets are built once at a small ``lam``.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import asdict, dataclass, field

from .engine import KIND_NAMES, GarblingContext
from .gadgets import GarbledGadget, garble_base_extension, garble_scaling, garble_scaling_chain, make_scaling_spec
from .rns import RnsBase, cpm_base, make_base, scale_moduli

COUNT_LAMBDA = 16


def formula_be_cost(base: RnsBase) -> int:
    """Double sum over ``1 <= i <= j <= k-1`` of ``p_j``."""
    p = base.moduli
    k = len(p)
    return sum(p[j] for i in range(k - 1) for j in range(i, k - 1))


def formula_be_cost_by_source(base: RnsBase) -> int:
    """Alternative reading: every source digit ``p_i`` projected once per later modulus."""
    p = base.moduli
    k = len(p)
    return sum((k - 1 - i) * p[i] for i in range(k - 1))


def measured_cost(gadget: GarbledGadget) -> int:
    """Ciphertexts of one gadget instance (table rows actually constructed)."""
    return gadget.ciphertext_count // max(gadget.count, 1)


def breakdown(gadget: GarbledGadget) -> dict[str, int]:
    """Per-gate-type ciphertexts of one instance, keyed ``kind in->out``."""
    out: Counter = Counter()
    for t in gadget.tables:
        key = f"{KIND_NAMES[t.kind]} {'x'.join(map(str, t.in_moduli))}->{t.out_modulus}"
        out[key] += t.ciphertexts // max(gadget.count, 1)
    return dict(out)


def _ctx(row_reduction: bool) -> GarblingContext:
    return GarblingContext(b"costing", COUNT_LAMBDA, row_reduction)


def be_cost(base: RnsBase, row_reduction: bool = False) -> int:
    """Measured cost of extending to the last modulus from all the others."""
    return measured_cost(garble_base_extension(base, len(base) - 1, _ctx(row_reduction)))


def scaling_cost(base: RnsBase, s: int, row_reduction: bool = False) -> int:
    return measured_cost(garble_scaling(make_scaling_spec(base, s), _ctx(row_reduction)))


def chained_cost(base: RnsBase, steps, row_reduction: bool = False) -> int:
    return measured_cost(garble_scaling_chain(base, tuple(steps), _ctx(row_reduction)))


def _power_of_two(s: int) -> int | None:
    return s.bit_length() - 1 if s > 1 and s & (s - 1) == 0 else None


def chain_base(base: RnsBase, s: int) -> RnsBase | None:
    """Base on which ``s = 2**ell`` can run as ``ell`` chained scale-by-2 steps.

    The base itself if it contains 2, otherwise the base with its ``s``
    modulus replaced by 2 (undoing the micro-benchmark substitution).
    """
    ell = _power_of_two(s)
    if ell is None:
        return None
    if 2 in base.moduli:
        return base
    if s in base.moduli:
        return make_base(tuple(2 if m == s else m for m in base.moduli))
    return None


@dataclass
class CostReport:
    base: tuple[int, ...]
    s: int
    formula_count: int
    formula_by_source: int
    be_measured: int
    measured_count: int
    measured_count_rr: int
    chained_count: int | None
    chained_count_rr: int | None
    single_step_count: int | None
    breakdown: dict[str, int] = field(default_factory=dict)
    row_reduction: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def compare(base: RnsBase, s: int) -> CostReport:
    """Formula vs measured counts for one scaling configuration.

    ``measured_count`` is the fused gadget without row reduction,
    ``measured_count_rr`` with it.  For ``s = 2**ell`` the chained columns
    hold the cost of ``ell`` successive scale-by-2 gadgets (see ``chain_base``).
    """
    scale_moduli(s, base)
    gadget = garble_scaling(make_scaling_spec(base, s), _ctx(False))
    cb = chain_base(base, s)
    ell = _power_of_two(s)
    single = chained = chained_rr = None
    if cb is not None:
        single = scaling_cost(cb, 2)
        chained = chained_cost(cb, (2,) * ell)
        chained_rr = chained_cost(cb, (2,) * ell, True)
    return CostReport(tuple(base.moduli), s, formula_be_cost(base), formula_be_cost_by_source(base),
                      be_cost(base), measured_cost(gadget), scaling_cost(base, s, True),
                      chained, chained_rr, single, breakdown(gadget))


CSV_COLUMNS = ("k", "base", "formula", "formula_by_source", "measured", "measured_rr",
               "single_step", "fused", "chained")


def cpm_sweep(ks=range(2, 9), ell: int = 5) -> list[dict]:
    """One row per CPM base: base-extension formula vs measured, and scaling counts.

    ``formula``/``measured`` are the base extension into the last modulus of
    the CPM base; ``single_step`` is one scale-by-2 gadget on that base;
    ``fused`` is one scale-by-``2**ell`` gadget on the base with 2 replaced
    by ``2**ell``; ``chained`` is ``ell`` scale-by-2 gadgets.  Scaling columns
    are counted without row reduction.
    """
    rows = []
    for k in ks:
        base = cpm_base(k)
        fused_base = cpm_base(k, two_power=ell)
        rows.append({
            "k": k,
            "base": " ".join(map(str, base.moduli)),
            "formula": formula_be_cost(base),
            "formula_by_source": formula_be_cost_by_source(base),
            "measured": be_cost(base),
            "measured_rr": be_cost(base, True),
            "single_step": scaling_cost(base, 2) if k >= 2 else None,
            "fused": scaling_cost(fused_base, 2 ** ell),
            "chained": chained_cost(base, (2,) * ell),
        })
    return rows


def to_csv(rows, columns=None) -> str:
    columns = list(columns or (rows[0].keys() if rows else CSV_COLUMNS))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
