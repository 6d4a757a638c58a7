import math

import numpy as np
import pytest

from conftest import gradcheck_problem
from s4convd import dataio
from s4convd.core import NumericalError, ValidationError
from s4convd.model import PARAM_NAMES, ModelConfig, ModelParams, init_params
from s4convd.training import (
    GradientTape,
    OptimizerState,
    backward,
    clip_gradients,
    evaluate,
    finite_difference_check,
    loss,
    sgd_step,
    train,
)

TINY = dict(input_dim=4, measurement_dim=4, state_dim=3, seq_len=16, dropout_p=0.0)


def tiny_problem(variant, seed=0):
    cfg = ModelConfig(**TINY, kernel_variant=variant)
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 16, 4))
    y = r.normal(size=(2, 16))
    mask = r.random((2, 16)) > 0.2
    return cfg, init_params(cfg, seed), x, y, mask


# ---------------------------------------------------------------- loss


def test_loss_zero_when_equal(rng):
    p = rng.normal(size=(3, 5))
    assert loss(p, p) == 0.0


def test_loss_constant_offset(rng):
    p = rng.normal(size=(3, 5))
    assert abs(loss(p + 0.7, p) - 0.49) < 1e-14


def test_loss_matches_rmsle_squared():
    v = loss(np.log1p([3.0, 1.0]), np.log1p([1.0, 3.0]))
    assert abs(v - math.log(2) ** 2) < 1e-12


def test_loss_mask():
    assert loss([1.0, 5.0], [1.0, 0.0], [True, False]) == 0.0
    with pytest.raises(ValidationError):
        loss([1.0], [1.0], [False])


# ---------------------------------------------------------------- backward


@pytest.mark.parametrize("variant", ["s4d", "s4convd"])
def test_zero_decoder_cuts_encoder_gradient(variant):
    cfg, p, x, y, m = tiny_problem(variant)
    arrays = p.arrays()
    arrays["dec_w"] = np.zeros_like(arrays["dec_w"])
    _, tape = backward(ModelParams.from_arrays(arrays), x, y[..., None], m[..., None], cfg)
    assert np.all(tape["enc_w"] == 0.0) and np.all(tape["enc_b"] == 0.0)


def test_decoder_bias_gradient_closed_form(rng):
    cfg = ModelConfig(**{**TINY, "seq_len": 1})
    p = init_params(cfg, 2)
    x = rng.normal(size=(3, 1, 4))
    y = rng.normal(size=(3, 1, 1))
    from s4convd.model import forward

    residual = forward(p, x, cfg) - y
    _, tape = backward(p, x, y, None, cfg)
    assert abs(tape["dec_b"][0] - 2.0 * residual.mean()) < 1e-14


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("variant", ["s4d", "s4convd"])
def test_gradients_match_finite_differences(variant, seed):
    cfg, p, x, y, m = gradcheck_problem(variant, seed)
    errors = finite_difference_check(p, x, y, m, cfg)
    assert set(errors) == set(PARAM_NAMES)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, f"{worst}: {errors[worst]:.2e}"


def test_train_mode_backward_uses_forward_mask():
    cfg, p, x, y, _ = tiny_problem("s4convd")
    cfg = ModelConfig(**{**TINY, "dropout_p": 0.3})
    v1, t1 = backward(p, x, y[..., None], None, cfg, seed=[4, 2], train_mode=True)
    v2, t2 = backward(p, x, y[..., None], None, cfg, seed=[4, 2], train_mode=True)
    assert v1 == v2 and all(np.array_equal(t1[k], t2[k]) for k in PARAM_NAMES)


def test_small_step_never_increases_loss():
    for seed in range(50):
        cfg, p, x, y, m = tiny_problem("s4convd" if seed % 2 else "s4d", seed)
        before, tape = backward(p, x, y[..., None], m[..., None], cfg)
        stepped, _ = sgd_step(p, tape, OptimizerState(lr=1e-4))
        after, _ = backward(stepped, x, y[..., None], m[..., None], cfg)
        assert after <= before + 1e-12, seed


# ---------------------------------------------------------------- optimizer


def _scalar(value):
    cfg = ModelConfig(input_dim=1, measurement_dim=1, state_dim=1, output_dim=1)
    arrays = {k: np.full(s, value) for k, s in cfg.shapes().items()}
    return ModelParams.from_arrays(arrays)


def _tape(value):
    return GradientTape({k: np.full(a.shape, value) for k, a in _scalar(0.0).arrays().items()})


def test_sgd_zero_gradient():
    p = _scalar(0.3)
    q, _ = sgd_step(p, _tape(0.0), OptimizerState())
    assert all(np.array_equal(p.arrays()[k], q.arrays()[k]) for k in PARAM_NAMES)


def test_sgd_momentum_hand_values():
    p, state = _scalar(1.0), OptimizerState(lr=0.001, momentum=0.9)
    p, state = sgd_step(p, _tape(1.0), state)
    assert state.velocity["enc_w"][0, 0] == 1.0
    assert abs(p.enc_w[0, 0] - 0.999) < 1e-15
    p, state = sgd_step(p, _tape(1.0), state)
    assert abs(state.velocity["enc_w"][0, 0] - 1.9) < 1e-15
    assert abs(p.enc_w[0, 0] - 0.9971) < 1e-15


def test_sgd_single_step_scales_with_lr():
    p = _scalar(0.5)
    q1, _ = sgd_step(p, _tape(0.25), OptimizerState(lr=0.01))
    q4, _ = sgd_step(p, _tape(0.25), OptimizerState(lr=0.04))
    d1 = q1.enc_w - p.enc_w
    d4 = q4.enc_w - p.enc_w
    assert np.allclose(d4, 4.0 * d1, rtol=1e-12)


def test_optimizer_state_validation():
    with pytest.raises(ValidationError):
        OptimizerState(lr=-1.0)
    with pytest.raises(ValidationError):
        OptimizerState(momentum=1.0)


def test_non_finite_update_is_numeric():
    tape = _tape(1e308)
    with pytest.raises(NumericalError):
        sgd_step(_scalar(-1e308), tape, OptimizerState(lr=1e10))


def test_clip_gradients():
    tape = GradientTape({"a": np.array([3.0]), "b": np.array([4.0])})
    clipped = clip_gradients(tape, 1.0)
    assert abs(clipped.global_norm() - 1.0) < 1e-15
    assert clip_gradients(tape, 10.0) is tape


# ---------------------------------------------------------------- loop


@pytest.fixture(scope="module")
def windows():
    records = dataio.synth_dataset(0, 2, 14 * 24, noise=0.0)
    return dataio.split_windows(dataio.temporal_split(records), "minimal4", 48, 24)


def _cfg(variant):
    return ModelConfig(measurement_dim=16, state_dim=8, seq_len=48, kernel_variant=variant, dropout_p=0.0)


def test_zero_lr_leaves_params(windows):
    cfg = _cfg("s4d")
    one_batch = windows["train"].subset(slice(0, 4))
    start = init_params(cfg, 0)
    p, history = train(cfg, {"train": one_batch}, epochs=1, batch_size=4, lr=0.0, params=start)
    assert len(history) == 1
    assert all(np.array_equal(p.arrays()[k], start.arrays()[k]) for k in PARAM_NAMES)


@pytest.mark.parametrize("variant", ["s4d", "s4convd"])
def test_overfit_synthetic(windows, variant):
    _, history = train(_cfg(variant), {"train": windows["train"]}, epochs=50, batch_size=4, seed=0)
    assert history[-1].loss < 0.1 * history[0].loss


def test_same_seed_same_history(windows):
    cfg = ModelConfig(measurement_dim=8, state_dim=4, seq_len=48, dropout_p=0.1)
    _, h1 = train(cfg, windows, epochs=2, batch_size=4, seed=11)
    _, h2 = train(cfg, windows, epochs=2, batch_size=4, seed=11)
    _, h3 = train(cfg, windows, epochs=2, batch_size=4, seed=12)
    assert h1 == h2
    assert h1 != h3
    assert [r.split for r in h1] == ["train", "val", "train", "val"]


def test_divergence_reports_coordinates(windows):
    cfg = _cfg("s4d")
    with pytest.raises(NumericalError, match=r"epoch 1, batch \d+"):
        train(cfg, {"train": windows["train"]}, epochs=1, batch_size=4, lr=1e8)


def test_empty_train_split(windows):
    with pytest.raises(ValidationError):
        train(_cfg("s4d"), {"train": windows["train"].subset(slice(0, 0))}, epochs=1)


def test_evaluate_reports_rmsle(windows):
    cfg = _cfg("s4d")
    value, score = evaluate(init_params(cfg, 0), windows["val"], cfg)
    assert value > 0 and score > 0
