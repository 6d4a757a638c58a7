"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 25 minutes on one
core; criteria 7 and 8 dominate).
"""
import math
import time

import numpy as np
import pytest

from conftest import gradcheck_problem
from s4convd import dataio, perf
from s4convd.kernelgen import s4d_kernel, ssm_recurrence_impulse
from s4convd.metrics import rmsle
from s4convd.model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from s4convd.perf import GpuSpec, KernelResourceUsage, Resource
from s4convd.seqconv import ConvPlan, causal_conv, direct_conv
from s4convd.training import finite_difference_check, train

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


def test_c01_kernel_equivalence(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n, length = int(rng.integers(1, 65)), int(rng.integers(1, 1025))
        a, b, c = perf.random_stable_system(n, int(rng.integers(1 << 31)))
        diff = s4d_kernel(a, b, c, length).values - ssm_recurrence_impulse(a, b, c, length).values
        worst = max(worst, float(np.max(np.abs(diff))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 10.0
    report(1, ok, f"max abs {worst:.2e} (<= 1e-10), {elapsed:.1f} s (< 10 s)")
    assert ok


def test_c02_fft_correctness(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        length = int(rng.integers(1, 4097))
        u, k = rng.normal(size=length), rng.normal(size=length)
        diff = causal_conv(u, k, ConvPlan.for_length(length)) - direct_conv(u, k)
        worst = max(worst, float(np.max(np.abs(diff))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 30.0
    report(2, ok, f"max abs {worst:.2e} (<= 1e-10), {elapsed:.1f} s (< 30 s)")
    assert ok


def test_c03_gradient_fidelity(report):
    t0 = time.perf_counter()
    errors = {}
    for variant in ("s4d", "s4convd"):
        cfg, p, x, y, m = gradcheck_problem(variant, 0)
        assert (cfg.measurement_dim, cfg.state_dim, cfg.seq_len, x.shape[0], cfg.dropout_p) == (4, 3, 16, 2, 0.0)
        per_param = finite_difference_check(p, x, y, m, cfg)
        errors[variant] = max(per_param.items(), key=lambda kv: kv[1])
    elapsed = time.perf_counter() - t0
    ok = all(err < 1e-4 for _, err in errors.values()) and elapsed < 60.0
    detail = ", ".join(f"{v} worst {name} {err:.1e}" for v, (name, err) in errors.items())
    report(3, ok, f"{detail} (< 1e-4), {elapsed:.1f} s (< 60 s)")
    assert ok


def test_c04_rmsle_golden(report):
    values = (rmsle([math.e - 1], [0]), rmsle([3, 1], [1, 3]), rmsle([0.0, 2.5, 1e4], [0.0, 2.5, 1e4]))
    ok = abs(values[0] - 1.0) <= 1e-12 and abs(values[1] - math.log(2)) <= 1e-12 and values[2] == 0.0
    report(4, ok, "rmsle values " + ", ".join(f"{v:.15f}" for v in values))
    assert ok


def test_c05_occupancy(report):
    r = perf.occupancy(GpuSpec(), KernelResourceUsage(1024, 37, 8192))
    got = (r.resident_blocks, r.active_warps, r.occupancy, r.blocks_limited_by[Resource.SHARED], r.limiting_resource)
    ok = got == (1, 32, 0.5, 7, Resource.REGISTERS) and r.shared_per_block == 8192 + 512
    report(5, ok, f"blocks {got[0]}, warps {got[1]}, occupancy {100 * got[2]:.0f}%, "
                  f"shared limit {got[3]}, limited by {got[4].value}")
    assert ok


def test_c06_tiling(report, tmp_path):
    n, length, tiles = 4096, 8192, (8, 16, 32, 64)
    a, b, c = perf.random_stable_system(n, 0)
    naive = s4d_kernel(a, b, c, length).values
    worst = {t: float(np.max(np.abs(perf.tiled_kernel_materialize(a, b, c, length, t).values - naive))) for t in tiles}
    del naive
    rows = perf.bench_tiling(n, length, tiles, repeats=3)
    csv = tmp_path / "bench_tiling.csv"
    csv.write_text(perf.bench_csv(rows))
    speedups = {r.tile: r.speedup for r in rows if r.variant == "tiled"}
    ok = max(worst.values()) <= 1e-10 and sorted(speedups) == list(tiles)
    report(6, ok, f"max abs {max(worst.values()):.2e} (<= 1e-10); speedup "
                  + ", ".join(f"tile {t}: {s:.2f}x" for t, s in speedups.items()))
    assert ok


# desk-scale ablation: seed-42 synthetic set, 8 buildings, 8 weeks hourly, 20 epochs
ABLATION_EPOCHS = 20
SEED = 42


@pytest.fixture(scope="module")
def ablation_windows():
    records = dataio.synth_dataset(42, 8, 8 * 168)
    return dataio.split_windows(dataio.temporal_split(records), "minimal4", 168, 24)


def _val_curve(history):
    return [r.rmsle for r in history if r.split == "val"]


@pytest.fixture(scope="module")
def ablation_runs(ablation_windows):
    runs = {}
    for variant in ("s4convd", "s4d"):
        t0 = time.perf_counter()
        _, history = train(ModelConfig(kernel_variant=variant), ablation_windows, epochs=ABLATION_EPOCHS,
                           batch_size=16, seed=SEED)
        runs[variant] = (history, time.perf_counter() - t0)
    return runs


def test_c07_ablation(report, ablation_runs):
    lines, ok = [], True
    total = sum(t for _, t in ablation_runs.values())
    for variant, (history, _) in ablation_runs.items():
        curve = _val_curve(history)
        ok &= curve[-1] < 0.8 * curve[0]
        lines.append(f"{variant} {curve[0]:.4f} -> {curve[-1]:.4f}")
    gap = _val_curve(ablation_runs["s4convd"][0])[-1] - _val_curve(ablation_runs["s4d"][0])[-1]
    ok &= total < 15 * 60
    report(7, ok, f"{'; '.join(lines)} (final < 0.8x epoch 1); gap s4convd - s4d = {gap:+.4f}; "
                  f"{total:.0f} s (< 900 s)")
    assert ok


def test_c08_robustness(report, ablation_windows, ablation_runs):
    cfg = ModelConfig(kernel_variant="s4convd")
    reference = ablation_runs["s4convd"][0]
    repeats = [train(cfg, ablation_windows, epochs=ABLATION_EPOCHS, seed=SEED)[1] for _ in range(2)]
    identical = all(h == reference for h in repeats)
    finals = [_val_curve(reference)[-1]]
    finals += [_val_curve(train(cfg, ablation_windows, epochs=ABLATION_EPOCHS, seed=s)[1])[-1] for s in (1, 2)]
    spread = (max(finals) - min(finals)) / float(np.mean(finals))
    ok = identical and spread < 0.25
    report(8, ok, f"same-seed histories identical: {identical}; final rmsle "
                  + ", ".join(f"{f:.4f}" for f in finals) + f", spread {100 * spread:.1f}% of mean (< 25%)")
    assert ok


def test_c09_split_integrity(report):
    records = dataio.synth_dataset(42, 1, 10_000)
    sp = dataio.temporal_split(records)
    sizes = (len(sp.train), len(sp.val), len(sp.test))
    ordered = sp.train["timestamp"].max() < sp.val["timestamp"].min() <= sp.val["timestamp"].max() \
        < sp.test["timestamp"].min()
    ok = len(records) == 10_000 and all(abs(g - w) <= 1 for g, w in zip(sizes, (5770, 1694, 2536))) and ordered \
        and sum(sizes) == len(records)
    report(9, ok, f"sizes {sizes[0]}/{sizes[1]}/{sizes[2]} (5770/1694/2536 +- 1), ordered and disjoint: {ordered}")
    assert ok


def test_c10_checkpoint_round_trip(report, tmp_path):
    cfg = ModelConfig()
    rng = np.random.default_rng(10)
    arrays = init_params(cfg, 10).arrays()
    arrays["c_re"] = arrays["c_re"] + rng.normal(size=arrays["c_re"].shape)  # move off the init values
    params = ModelParams.from_arrays(arrays)
    x = rng.normal(size=(3, cfg.seq_len, cfg.input_dim))
    before = forward(params, x, cfg)
    save_checkpoint(params, tmp_path / "a.s4cd")
    loaded = load_checkpoint(tmp_path / "a.s4cd")
    save_checkpoint(loaded, tmp_path / "b.s4cd")
    same_bytes = (tmp_path / "a.s4cd").read_bytes() == (tmp_path / "b.s4cd").read_bytes()
    same_preds = np.array_equal(forward(loaded, x, cfg), before)
    ok = same_bytes and same_preds
    report(10, ok, f"byte-identical re-save: {same_bytes}; predictions identical: {same_preds}")
    assert ok
