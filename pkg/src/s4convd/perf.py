"""Occupancy arithmetic for CUDA-style multiprocessors and a cache-tiled kernel materializer."""
from __future__ import annotations

import contextlib
import enum
import json
import math
import os
import statistics
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .core import ComplexVec, Kernel, ValidationError
from .kernelgen import _as_kernel, _check_triplet, mode_sum, s4d_kernel, vandermonde


# ---------------------------------------------------------------- occupancy


@dataclass(frozen=True)
class GpuSpec:
    """Per-multiprocessor limits; defaults describe a Tesla P100 (compute capability 6.0)."""

    max_threads_per_block: int = 1024
    max_threads_per_sm: int = 2048
    threads_per_warp: int = 32
    max_registers_per_block: int = 65536
    max_registers_per_sm: int = 65536
    register_alloc_unit: int = 64
    register_alloc_granularity: str = "warp"
    max_shared_per_block: int = 48 * 1024
    runtime_shared_overhead: int = 512
    shared_per_sm: int = 65536
    sm_count: int = 56
    max_warps_per_sm: int = 64

    def __post_init__(self):
        for key, value in asdict(self).items():
            if key == "register_alloc_granularity":
                if value != "warp":
                    raise ValidationError("only warp-granular register allocation is modelled")
            elif int(value) <= 0:
                raise ValidationError(f"{key} must be positive")
        if self.max_threads_per_block % self.threads_per_warp:
            raise ValidationError("threads_per_warp must divide max_threads_per_block")


@dataclass(frozen=True)
class KernelResourceUsage:
    threads_per_block: int = 1024
    registers_per_thread: int = 37
    shared_bytes_per_block: int = 8192


class Resource(str, enum.Enum):
    THREADS = "threads"
    REGISTERS = "registers"
    SHARED = "shared"
    WARPS = "warps"


@dataclass(frozen=True)
class OccupancyReport:
    blocks_limited_by: dict
    warps_per_block: int
    registers_per_block: int
    shared_per_block: int
    resident_blocks: int
    active_warps: int
    max_warps: int
    limiting_resource: Resource

    @property
    def occupancy(self) -> float:
        return self.active_warps / self.max_warps

    def as_text(self) -> str:
        rows = [
            ("warps per block", self.warps_per_block),
            ("registers per block", self.registers_per_block),
            ("shared bytes per block", self.shared_per_block),
        ]
        rows += [(f"blocks limited by {r.value}", n) for r, n in self.blocks_limited_by.items()]
        rows += [
            ("resident blocks", self.resident_blocks),
            ("active warps", f"{self.active_warps} / {self.max_warps}"),
            ("occupancy", f"{100.0 * self.occupancy:.1f}%"),
            ("limiting resource", self.limiting_resource.value),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)

    def as_keyvalue(self) -> str:
        items = {
            "warps_per_block": self.warps_per_block,
            "registers_per_block": self.registers_per_block,
            "shared_per_block": self.shared_per_block,
            **{f"blocks_limited_by_{r.value}": n for r, n in self.blocks_limited_by.items()},
            "resident_blocks": self.resident_blocks,
            "active_warps": self.active_warps,
            "max_warps": self.max_warps,
            "occupancy": round(self.occupancy, 6),
            "limiting_resource": self.limiting_resource.value,
        }
        return json.dumps(items, indent=2)


def _round_up(x: int, unit: int) -> int:
    return -(-x // unit) * unit


def registers_per_block(spec: GpuSpec, usage: KernelResourceUsage) -> int:
    warps = -(-usage.threads_per_block // spec.threads_per_warp)
    per_warp = _round_up(usage.registers_per_thread * spec.threads_per_warp, spec.register_alloc_unit)
    return per_warp * warps


def occupancy(spec: GpuSpec, usage: KernelResourceUsage) -> OccupancyReport:
    """Resident blocks and warps per multiprocessor for one kernel launch configuration.

    Registers are allocated per warp in multiples of ``register_alloc_unit``;
    each block's shared memory carries the runtime overhead.
    """
    if usage.threads_per_block <= 0:
        raise ValidationError("threads_per_block must be positive")
    if usage.registers_per_thread <= 0:
        raise ValidationError("registers_per_thread must be positive")
    if usage.shared_bytes_per_block < 0:
        raise ValidationError("shared_bytes_per_block must be non-negative")
    if usage.threads_per_block > spec.max_threads_per_block:
        raise ValidationError(
            f"threads: {usage.threads_per_block} per block exceeds the limit of {spec.max_threads_per_block}"
        )
    if usage.shared_bytes_per_block > spec.max_shared_per_block:
        raise ValidationError(
            f"shared memory: {usage.shared_bytes_per_block} B per block exceeds the limit of "
            f"{spec.max_shared_per_block} B"
        )
    warps = -(-usage.threads_per_block // spec.threads_per_warp)
    regs = registers_per_block(spec, usage)
    if regs > spec.max_registers_per_block:
        raise ValidationError(
            f"registers: {regs} per block exceeds the limit of {spec.max_registers_per_block}"
        )
    shared = usage.shared_bytes_per_block + spec.runtime_shared_overhead
    limits = {
        Resource.THREADS: spec.max_threads_per_sm // usage.threads_per_block,
        Resource.REGISTERS: spec.max_registers_per_sm // regs,
        Resource.SHARED: spec.shared_per_sm // shared,
        Resource.WARPS: spec.max_warps_per_sm // warps,
    }
    limiting = min(limits, key=limits.get)  # ties resolve in declaration order
    blocks = limits[limiting]
    return OccupancyReport(limits, warps, regs, shared, blocks, blocks * warps, spec.max_warps_per_sm, limiting)


# ---------------------------------------------------------------- tiling


def tiled_kernel_materialize(a_discrete: ComplexVec, b: ComplexVec, c: ComplexVec, L: int, tile: int = 32) -> Kernel:
    """Vandermonde kernel computed over (mode, lag) blocks of ``tile x tile``.

    Each mode tile keeps its local powers ``A**0 .. A**(tile-1)`` and a running
    block offset ``A**l0``, so no power is recomputed from scratch. Partial
    sums are reduced mode-ascending inside a tile and then tile-ascending.
    """
    if tile < 1:
        raise ValidationError(f"tile must be >= 1, got {tile}")
    _check_triplet(a_discrete, b, c, L)
    a = a_discrete.to_complex().ravel()
    w = (b.to_complex() * c.to_complex()).ravel()
    n = a.shape[0]
    lt = min(tile, L)
    local = vandermonde(a, lt)  # (N, lt)
    step = local[:, -1] * a  # A**lt
    n_tiles = -(-n // tile)
    partial = np.empty((n_tiles, L), dtype=np.complex128)
    for t in range(n_tiles):
        rows = slice(t * tile, min((t + 1) * tile, n))
        offset = np.ones(rows.stop - rows.start, dtype=np.complex128)
        w_t, local_t, step_t = w[rows], local[rows], step[rows]
        for l0 in range(0, L, lt):
            width = min(lt, L - l0)
            block = local_t[:, :width] if l0 == 0 else offset[:, None] * local_t[:, :width]
            partial[t, l0 : l0 + width] = mode_sum(w_t, block)
            offset = offset * step_t
    if n_tiles == 1:
        total = partial[0]
    else:
        total = np.cumsum(partial, axis=0)[-1]
    return _as_kernel(total.real)


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchRow:
    variant: str
    tile: int
    n: int
    l: int
    median_ns: int
    speedup: float


EQUIVALENCE_TOL = 1e-10


@contextlib.contextmanager
def _pinned_thread():
    """Restrict the process to one CPU for the duration of the timings, if the OS allows it."""
    if not hasattr(os, "sched_getaffinity"):
        yield
        return
    before = os.sched_getaffinity(0)
    try:
        os.sched_setaffinity(0, {min(before)})
    except OSError:
        yield
        return
    try:
        yield
    finally:
        os.sched_setaffinity(0, before)


def _median_ns(fn, repeats: int, warmup: int = 1) -> int:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(statistics.median(samples))


def random_stable_system(n: int, seed: int = 0, radius: tuple[float, float] = (0.5, 0.999)):
    """Random discrete poles strictly inside the unit disc, with complex B and C."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(*radius, n) * np.exp(1j * rng.uniform(0.0, 2.0 * math.pi, n))
    b = rng.normal(size=n) + 1j * rng.normal(size=n)
    c = rng.normal(size=n) + 1j * rng.normal(size=n)
    return ComplexVec.from_complex(a), ComplexVec.from_complex(b), ComplexVec.from_complex(c)


def bench_tiling(N: int, L: int, tile_sizes, repeats: int = 3, seed: int = 0) -> list[BenchRow]:
    """Time the naive Vandermonde path against each tiling on identical inputs.

    A tiled variant is timed only after it matches the naive kernel within
    1e-10 max abs; failing variants are left out of the report.
    """
    if repeats < 3:
        raise ValidationError("repeats must be >= 3")
    a, b, c = random_stable_system(N, seed)
    reference = s4d_kernel(a, b, c, L).values
    candidates = []
    for tile in tile_sizes:
        got = tiled_kernel_materialize(a, b, c, L, tile).values
        err = float(np.max(np.abs(got - reference)))
        if err > EQUIVALENCE_TOL:
            warnings.warn(f"tile={tile}: max abs diff {err:.3e} exceeds {EQUIVALENCE_TOL}; variant dropped")
            continue
        candidates.append(int(tile))
    del reference

    # one (naive, tiled) row pair per tile; the naive path is timed once
    rows = []
    with _pinned_thread():
        naive_ns = _median_ns(lambda: s4d_kernel(a, b, c, L), repeats)
        for tile in candidates:
            ns = _median_ns(lambda: tiled_kernel_materialize(a, b, c, L, tile), repeats)
            rows.append(BenchRow("naive", tile, N, L, naive_ns, 1.0))
            rows.append(BenchRow("tiled", tile, N, L, ns, naive_ns / ns))
    return rows


BENCH_HEADER = "variant,tile,n,l,median_ns,speedup"


def bench_csv(rows: list[BenchRow]) -> str:
    lines = [BENCH_HEADER]
    lines += [f"{r.variant},{r.tile},{r.n},{r.l},{r.median_ns},{r.speedup:.4f}" for r in rows]
    return "\n".join(lines) + "\n"
