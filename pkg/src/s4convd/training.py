"""Gradients, SGD with momentum and the epoch loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import seqconv
from .core import NumericalError, ValidationError
from .model import (
    PARAM_NAMES,
    ModelConfig,
    ModelParams,
    conv_taps_vjp,
    forward,
    forward_cached,
    gelu_grad,
    init_params,
    to_meter_units,
)

log = logging.getLogger(__name__)


@dataclass
class GradientTape:
    grads: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.grads.values())))


@dataclass
class OptimizerState:
    lr: float = 0.001
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError(f"learning rate must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")


def _as_targets(pred: np.ndarray, target: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(pred.shape)
    return target, mask


def loss(pred, target_log1p, mask=None) -> float:
    """Mean squared error over the masked entries (log1p space)."""
    pred = np.asarray(pred, dtype=np.float64)
    target, mask = _as_targets(pred, target_log1p, mask)
    count = int(mask.sum())
    if count == 0:
        raise ValidationError("loss mask selects no valid targets")
    diff = np.where(mask, pred - np.where(mask, target, 0.0), 0.0)
    return float((diff * diff).sum() / count)


def backward(params: ModelParams, batch, target, mask, config: ModelConfig, seed=0, train_mode: bool = False):
    """Loss and its gradient with respect to every parameter array.

    ``seed`` drives the dropout mask exactly as in :func:`model.forward`, so a
    train-mode backward differentiates the same sampled network.
    """
    value, tape, _ = _loss_and_grads(params, batch, target, mask, config, seed, train_mode)
    return value, tape


def _loss_and_grads(params, batch, target, mask, config, seed, train_mode):
    out, cache = forward_cached(params, batch, config, train_mode, seed)
    target, mask = _as_targets(out, target, mask)
    count = int(mask.sum())
    if count == 0:
        raise ValidationError("loss mask selects no valid targets")
    diff = np.where(mask, out - np.where(mask, target, 0.0), 0.0)
    value = float((diff * diff).sum() / count)

    g_out = 2.0 * diff / count  # (B, L, O)
    grads: dict[str, np.ndarray] = {}
    grads["dec_w"] = np.einsum("blo,bhl->oh", g_out, cache.act)
    grads["dec_b"] = g_out.sum(axis=(0, 1))

    g_act = np.einsum("blo,oh->bhl", g_out, params.dec_w)
    if cache.mask is not None:
        g_act = g_act * cache.mask
    g_s = g_act * gelu_grad(cache.s)

    d = params.ssm.d
    grads["d"] = (g_s * cache.v).sum(axis=(0, 2))
    g_v_conv, g_k = seqconv.batched_conv_vjp(cache.conv, g_s)
    g_v = g_v_conv + d[:, None] * g_s

    length = cache.x.shape[1]
    grads.update(conv_taps_vjp(params.ssm, config.kernel_variant, length, g_k))

    grads["enc_w"] = np.einsum("bhl,blf->hf", g_v, cache.x)
    grads["enc_b"] = g_v.sum(axis=(0, 2))

    for name in PARAM_NAMES:
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    return value, GradientTape({name: grads[name] for name in PARAM_NAMES}), out


def sgd_step(params: ModelParams, tape: GradientTape, state: OptimizerState) -> tuple[ModelParams, OptimizerState]:
    """Classical momentum: v <- mu*v + g; theta <- theta - lr*v."""
    arrays = params.arrays()
    velocity = {}
    updated = {}
    for name in PARAM_NAMES:
        g = tape[name]
        if g.shape != arrays[name].shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}, expected {arrays[name].shape}")
        v_prev = state.velocity.get(name)
        v = g.copy() if v_prev is None else state.momentum * v_prev + g
        velocity[name] = v
        with np.errstate(over="ignore", invalid="ignore"):
            updated[name] = arrays[name] - state.lr * v
        if not np.all(np.isfinite(updated[name])):
            raise NumericalError(f"update produced non-finite values in {name}")
    return ModelParams.from_arrays(updated), OptimizerState(state.lr, state.momentum, velocity)


def clip_gradients(tape: GradientTape, max_norm: float) -> GradientTape:
    norm = tape.global_norm()
    if norm <= max_norm or norm == 0.0:
        return tape
    scale = max_norm / norm
    return GradientTape({k: g * scale for k, g in tape.grads.items()})


def finite_difference_check(
    params: ModelParams,
    batch,
    target,
    mask,
    config: ModelConfig,
    h: float = 1e-5,
    floor: float = 1e-8,
) -> dict[str, float]:
    """Max relative error per parameter between reverse-mode and central differences.

    Dropout is disabled; the relative error denominator is ``max(|g|, floor)``.
    """
    _, tape = backward(params, batch, target, mask, config)
    arrays = {k: v.copy() for k, v in params.arrays().items()}

    def f(arrs):
        out = forward(ModelParams.from_arrays(arrs), batch, config)
        return loss(out, target, mask)

    worst = {}
    for name in PARAM_NAMES:
        base = arrays[name]
        g = tape[name]
        err = 0.0
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + h
            f_plus = f(arrays)
            base[idx] = orig - h
            f_minus = f(arrays)
            base[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = max(err, abs(fd - g[idx]) / max(abs(g[idx]), floor))
        worst[name] = err
    return worst


@dataclass
class HistoryRow:
    epoch: int
    split: str
    loss: float
    rmsle: float


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate(params: ModelParams, windows, config: ModelConfig, batch_size: int = 64) -> tuple[float, float]:
    """Eval-mode (loss, RMSLE) over every valid target of a window set."""
    sq_log = 0.0
    sq_rmsle = 0.0
    count = 0
    for start in range(0, len(windows), batch_size):
        sl = slice(start, start + batch_size)
        out = forward(params, windows.inputs[sl], config)[..., 0]
        m = windows.mask[sl]
        t = windows.targets[sl]
        diff = np.where(m, out - np.where(m, t, 0.0), 0.0)
        sq_log += float((diff * diff).sum())
        clamped = np.log1p(to_meter_units(out))
        d2 = np.where(m, clamped - np.where(m, t, 0.0), 0.0)
        sq_rmsle += float((d2 * d2).sum())
        count += int(m.sum())
    if count == 0:
        raise ValidationError("window set has no valid targets")
    return sq_log / count, float(np.sqrt(sq_rmsle / count))


def train(
    config: ModelConfig,
    data_splits,
    epochs: int = 100,
    batch_size: int = 16,
    log_interval: int = 200,
    seed: int = 0,
    lr: float = 0.001,
    momentum: float = 0.9,
    clip_norm: float | None = None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, list[HistoryRow]]:
    """Minibatch SGD over the ``train`` windows, scoring ``val`` (if present) after each epoch.

    ``data_splits`` maps split names to window sets (see :mod:`s4convd.dataio`).
    ``clip_norm`` rescales each minibatch gradient to that global norm at
    most; None or 0 leaves gradients untouched.
    Shuffling and dropout are seeded from ``seed``, so equal seeds give
    bit-identical histories.
    """
    train_ws = data_splits["train"]
    if len(train_ws) == 0:
        raise ValidationError("training split is empty")
    val_ws = data_splits.get("val") if hasattr(data_splits, "get") else None
    if params is None:
        params = init_params(config, seed)
    state = OptimizerState(lr, momentum)
    history: list[HistoryRow] = []

    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        sq_log = sq_rmsle = 0.0
        count = 0
        running = []
        for b_idx, idx in enumerate(_batches(len(train_ws), batch_size, rng)):
            x, t, m = train_ws.inputs[idx], train_ws.targets[idx], train_ws.mask[idx]
            try:
                value, tape, out = _loss_and_grads(params, x, t, m, config, [seed, epoch, b_idx], True)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b_idx}: {exc}") from exc
            if not np.isfinite(value):
                raise NumericalError(f"epoch {epoch}, batch {b_idx}: non-finite loss")
            if clip_norm:
                tape = clip_gradients(tape, clip_norm)
            try:
                params, state = sgd_step(params, tape, state)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b_idx}: {exc}") from exc

            n_valid = int(m.sum())
            sq_log += value * n_valid
            d2 = np.where(m, np.log1p(to_meter_units(out[..., 0])) - np.where(m, t, 0.0), 0.0)
            sq_rmsle += float((d2 * d2).sum())
            count += n_valid
            running.append(value)
            if log_interval and (b_idx + 1) % log_interval == 0:
                log.info("epoch %d batch %d running loss %.6f", epoch, b_idx + 1, float(np.mean(running)))
                running = []
        # train-split figures are accumulated from the train-mode minibatch passes
        train_loss = sq_log / count
        train_rmsle = float(np.sqrt(sq_rmsle / count))
        history.append(HistoryRow(epoch, "train", train_loss, train_rmsle))
        if val_ws is not None and len(val_ws):
            val_loss, val_rmsle = evaluate(params, val_ws, config)
            history.append(HistoryRow(epoch, "val", val_loss, val_rmsle))
            log.info("epoch %d train %.6f val %.6f (rmsle %.4f)", epoch, train_loss, val_loss, val_rmsle)
        else:
            log.info("epoch %d train %.6f", epoch, train_loss)
    return params, history
