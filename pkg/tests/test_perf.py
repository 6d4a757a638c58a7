import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import cvec
from s4convd import perf
from s4convd.core import ValidationError
from s4convd.kernelgen import s4d_kernel
from s4convd.perf import GpuSpec, KernelResourceUsage, Resource, occupancy

# ---------------------------------------------------------------- occupancy


def test_p100_reference_launch():
    r = occupancy(GpuSpec(), KernelResourceUsage(1024, 37, 8192))
    assert r.blocks_limited_by[Resource.SHARED] == 7
    assert r.blocks_limited_by[Resource.REGISTERS] == 1
    assert r.resident_blocks == 1
    assert r.active_warps == 32
    assert r.occupancy == 0.5
    assert r.limiting_resource is Resource.REGISTERS
    assert r.shared_per_block == 8704
    assert r.registers_per_block == 38912


def test_minimal_footprint_saturates():
    r = occupancy(GpuSpec(), KernelResourceUsage(32, 1, 0))
    assert r.resident_blocks == 64
    assert r.occupancy == 1.0


def test_gpu_spec_defaults():
    s = GpuSpec()
    values = (s.max_threads_per_block, s.max_threads_per_sm, s.threads_per_warp, s.max_registers_per_block,
              s.max_registers_per_sm, s.register_alloc_unit, s.max_shared_per_block, s.runtime_shared_overhead,
              s.shared_per_sm, s.sm_count, s.max_warps_per_sm)
    assert values == (1024, 2048, 32, 65536, 65536, 64, 49152, 512, 65536, 56, 64)


@pytest.mark.parametrize("usage, resource", [
    (KernelResourceUsage(2048, 8, 0), "threads"),
    (KernelResourceUsage(1024, 65, 0), "registers"),
    (KernelResourceUsage(256, 8, 60000), "shared"),
])
def test_per_block_limits_name_the_resource(usage, resource):
    with pytest.raises(ValidationError, match=resource):
        occupancy(GpuSpec(), usage)


def test_spec_validation():
    with pytest.raises(ValidationError):
        GpuSpec(threads_per_warp=0)
    with pytest.raises(ValidationError):
        GpuSpec(threads_per_warp=48)


specs = st.builds(
    GpuSpec,
    max_threads_per_block=st.sampled_from([256, 512, 1024]),
    max_threads_per_sm=st.sampled_from([1024, 1536, 2048]),
    max_registers_per_block=st.sampled_from([32768, 65536]),
    max_registers_per_sm=st.sampled_from([32768, 65536, 131072]),
    register_alloc_unit=st.sampled_from([64, 128, 256]),
    max_shared_per_block=st.sampled_from([16384, 49152]),
    runtime_shared_overhead=st.sampled_from([1, 512, 1024]),
    shared_per_sm=st.sampled_from([49152, 65536, 98304]),
    max_warps_per_sm=st.sampled_from([32, 48, 64]),
)


def _usage(spec, data):
    return KernelResourceUsage(
        data.draw(st.integers(1, spec.max_threads_per_block)),
        data.draw(st.integers(1, 255)),
        data.draw(st.integers(0, spec.max_shared_per_block)),
    )


def _brute_force(spec, usage):
    warps = -(-usage.threads_per_block // spec.threads_per_warp)
    regs_warp = -(-usage.registers_per_thread * spec.threads_per_warp // spec.register_alloc_unit)
    regs = regs_warp * spec.register_alloc_unit * warps
    shared = usage.shared_bytes_per_block + spec.runtime_shared_overhead
    best = 0
    for b in range(1, 4097):
        if (b * usage.threads_per_block <= spec.max_threads_per_sm and b * regs <= spec.max_registers_per_sm
                and b * shared <= spec.shared_per_sm and b * warps <= spec.max_warps_per_sm):
            best = b
        else:
            break
    return best, warps


@given(specs, st.data())
def test_matches_brute_force(spec, data):
    usage = _usage(spec, data)
    try:
        r = occupancy(spec, usage)
    except ValidationError:
        return
    blocks, warps = _brute_force(spec, usage)
    assert r.resident_blocks == blocks
    assert r.active_warps == blocks * warps == r.resident_blocks * r.warps_per_block
    assert r.occupancy == r.active_warps / spec.max_warps_per_sm
    assert r.resident_blocks == min(r.blocks_limited_by.values())
    assert r.blocks_limited_by[r.limiting_resource] == r.resident_blocks


@given(specs, st.data())
def test_monotone_in_registers_and_shared(spec, data):
    usage = _usage(spec, data)
    more_regs = KernelResourceUsage(usage.threads_per_block, usage.registers_per_thread + data.draw(st.integers(1, 64)),
                                    usage.shared_bytes_per_block)
    more_shared = KernelResourceUsage(usage.threads_per_block, usage.registers_per_thread,
                                      usage.shared_bytes_per_block + data.draw(st.integers(1, 4096)))
    try:
        base = occupancy(spec, usage).occupancy
    except ValidationError:
        return
    for bigger in (more_regs, more_shared):
        try:
            assert occupancy(spec, bigger).occupancy <= base
        except ValidationError:
            pass


def test_report_formats():
    r = occupancy(GpuSpec(), KernelResourceUsage())
    text = r.as_text()
    assert "limiting resource" in text and "50.0%" in text
    payload = json.loads(r.as_keyvalue())
    assert payload["resident_blocks"] == 1
    assert payload["blocks_limited_by_shared"] == 7
    assert payload["limiting_resource"] == "registers"


# ---------------------------------------------------------------- tiling


def test_single_tile_is_bit_identical(rng):
    a, b, c = perf.random_stable_system(20, 3)
    naive = s4d_kernel(a, b, c, 50).values
    assert np.array_equal(perf.tiled_kernel_materialize(a, b, c, 50, tile=64).values, naive)


def test_tiled_matches_naive():
    a, b, c = perf.random_stable_system(64, 1)
    diff = perf.tiled_kernel_materialize(a, b, c, 1024, 32).values - s4d_kernel(a, b, c, 1024).values
    assert np.max(np.abs(diff)) <= 1e-10


def test_tiled_single_mode_geometric():
    k = perf.tiled_kernel_materialize(cvec(0.5), cvec(1), cvec(1), 4, tile=2)
    assert k.values.tolist() == [[1.0, 0.5, 0.25, 0.125]]


@given(st.integers(1, 200), st.integers(1, 300), st.integers(1, 70), st.integers(0, 2**32 - 1))
def test_tiled_equivalence_property(n, length, tile, seed):
    a, b, c = perf.random_stable_system(n, seed)
    diff = perf.tiled_kernel_materialize(a, b, c, length, tile).values - s4d_kernel(a, b, c, length).values
    assert np.max(np.abs(diff)) <= 1e-10


def test_tile_validation():
    a, b, c = perf.random_stable_system(4)
    with pytest.raises(ValidationError):
        perf.tiled_kernel_materialize(a, b, c, 8, tile=0)


# ---------------------------------------------------------------- benchmark


def test_bench_rows_and_csv():
    rows = perf.bench_tiling(64, 256, [1, 8, 32], repeats=3)
    assert len(rows) == 2 * 3
    assert [r.variant for r in rows] == ["naive", "tiled"] * 3
    assert all(r.speedup == 1.0 for r in rows if r.variant == "naive")
    assert all(r.median_ns > 0 for r in rows)
    lines = perf.bench_csv(rows).splitlines()
    assert lines[0] == "variant,tile,n,l,median_ns,speedup"
    assert len(lines) == 7


def test_bench_drops_failing_variant(monkeypatch):
    real = perf.tiled_kernel_materialize

    def broken(a, b, c, L, tile=32):
        k = real(a, b, c, L, tile)
        return type(k)(k.values + (1e-3 if tile == 8 else 0.0))

    monkeypatch.setattr(perf, "tiled_kernel_materialize", broken)
    with pytest.warns(UserWarning, match="tile=8"):
        rows = perf.bench_tiling(16, 64, [8, 16], repeats=3)
    assert sorted({r.tile for r in rows}) == [16]


def test_bench_needs_three_repeats():
    with pytest.raises(ValidationError):
        perf.bench_tiling(8, 8, [4], repeats=2)
