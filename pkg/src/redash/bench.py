"""Online-phase timing of fused vs chained power-of-two scaling.

Only evaluation is timed.  Instances are garbled in chunks to bound memory;
within a chunk the work is split into one gadget per worker thread and the
gadgets are evaluated on a thread pool.  Hashing holds the GIL for the short
messages involved, so extra threads mostly overlap the numpy parts.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .engine import GarblingContext
from .gadgets import encode_planes, evaluate_gadget, garble_scaling_chain
from .rns import RnsBase, cpm_base


@dataclass
class BenchConfig:
    ell: int = 5
    k: int = 8
    lam: int = 16
    seed: bytes = b"bench"
    chunk: int = 2048
    repeat: int = 1


def micro_bases(k: int, ell: int) -> tuple[RnsBase, RnsBase]:
    """Fused base (2 replaced by ``2**ell``) and chained base (plain CPM)."""
    return cpm_base(k, two_power=ell), cpm_base(k)


def _split(total: int, parts: int) -> list[int]:
    q, r = divmod(total, parts)
    return [q + (i < r) for i in range(parts) if q + (i < r)]


def time_eval(base: RnsBase, steps, inputs: int, threads: int, cfg: BenchConfig) -> float:
    """Wall-clock milliseconds to evaluate ``inputs`` instances of the scaling chain."""
    threads = max(1, threads)
    rng = np.random.default_rng(int.from_bytes(cfg.seed[:8].ljust(8, b"\0"), "little"))
    total = 0.0
    done = 0
    chunk_id = 0
    with ThreadPoolExecutor(max_workers=threads) as pool:
        while done < inputs:
            size = min(cfg.chunk, inputs - done)
            jobs = []
            for part, count in enumerate(_split(size, threads)):
                ctx = GarblingContext(cfg.seed + f"/{chunk_id}/{part}".encode(), cfg.lam)
                g = garble_scaling_chain(base, steps, ctx, count)
                x = rng.integers(0, base.product, count)
                labels = encode_planes(g.secrets.inputs, g.secrets.offsets, x)
                g.secrets = None
                jobs.append((g, labels))
            best = float("inf")
            for _ in range(cfg.repeat):
                t0 = time.perf_counter()
                list(pool.map(lambda job: evaluate_gadget(*job), jobs))
                best = min(best, time.perf_counter() - t0)
            total += best
            done += size
            chunk_id += 1
            del jobs
    return total * 1000.0


def bench_row(sweep_value: int, inputs: int, threads: int, cfg: BenchConfig) -> dict:
    fused_base, chain_base = micro_bases(cfg.k, cfg.ell)
    fused = time_eval(fused_base, (2 ** cfg.ell,), inputs, threads, cfg)
    chained = time_eval(chain_base, (2,) * cfg.ell, inputs, threads, cfg)
    return {"sweep": sweep_value, "threads": threads, "inputs": inputs,
            "fused_ms": round(fused, 3), "chained_ms": round(chained, 3),
            "ratio": round(chained / fused, 3) if fused else float("inf")}


def bench_scaling(sweep: str, values, cfg: BenchConfig, fixed_inputs: int = 128,
                  fixed_threads: int = 1) -> list[dict]:
    """Rows over a thread-count sweep (``sweep="threads"``) or an input-size sweep."""
    rows = []
    for v in values:
        if sweep == "threads":
            rows.append(bench_row(v, fixed_inputs, v, cfg))
        elif sweep == "inputs":
            rows.append(bench_row(v, v, fixed_threads, cfg))
        else:
            raise ValueError(f"unknown sweep {sweep!r}; use 'threads' or 'inputs'")
    return rows


BENCH_COLUMNS = ("sweep", "threads", "inputs", "fused_ms", "chained_ms", "ratio")
