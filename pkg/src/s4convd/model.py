"""Encoder -> diagonal SSM convolution layer -> decoder network."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernelgen, seqconv
from .core import ComplexVec, DiagonalSSMParams, NumericalError, SequenceBatch, ValidationError
from .kernelgen import KernelVariant, sigmoid

GELU_SCALE = 1.702

CHECKPOINT_MAGIC = b"S4CD1"

# field order of the flat parameter layout; checkpoints and gradients follow it
PARAM_NAMES = (
    "enc_w",
    "enc_b",
    "log_a_re",
    "a_im",
    "b_re",
    "b_im",
    "c_re",
    "c_im",
    "d",
    "log_dt",
    "dec_w",
    "dec_b",
)


@dataclass
class ModelConfig:
    input_dim: int = 4
    measurement_dim: int = 128
    state_dim: int = 64
    output_dim: int = 1
    dropout_p: float = 0.01
    seq_len: int = 168
    kernel_variant: KernelVariant = KernelVariant.S4CONVD_ADAPTIVE

    def __post_init__(self):
        self.kernel_variant = KernelVariant.parse(self.kernel_variant)
        for name in ("input_dim", "measurement_dim", "state_dim", "output_dim", "seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def shapes(self) -> dict[str, tuple]:
        h, n = self.measurement_dim, self.state_dim
        return {
            "enc_w": (h, self.input_dim),
            "enc_b": (h,),
            "log_a_re": (h, n),
            "a_im": (h, n),
            "b_re": (h, n),
            "b_im": (h, n),
            "c_re": (h, n),
            "c_im": (h, n),
            "d": (h,),
            "log_dt": (h,),
            "dec_w": (self.output_dim, h),
            "dec_b": (self.output_dim,),
        }


@dataclass
class ModelParams:
    enc_w: np.ndarray
    enc_b: np.ndarray
    ssm: DiagonalSSMParams
    dec_w: np.ndarray
    dec_b: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(input_dim, measurement_dim, state_dim, output_dim)."""
        return (
            self.enc_w.shape[1],
            self.enc_w.shape[0],
            self.ssm.state_dim,
            self.dec_w.shape[0],
        )

    def arrays(self) -> dict[str, np.ndarray]:
        s = self.ssm
        return {
            "enc_w": self.enc_w,
            "enc_b": self.enc_b,
            "log_a_re": s.log_a_re,
            "a_im": s.a_im,
            "b_re": s.b.re,
            "b_im": s.b.im,
            "c_re": s.c.re,
            "c_im": s.c.im,
            "d": s.d,
            "log_dt": s.log_dt,
            "dec_w": self.dec_w,
            "dec_b": self.dec_b,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        a = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        missing = set(PARAM_NAMES) - set(a)
        if missing:
            raise ValidationError(f"missing parameter arrays: {sorted(missing)}")
        ssm = DiagonalSSMParams(
            a["log_a_re"],
            a["a_im"],
            ComplexVec(a["b_re"], a["b_im"]),
            ComplexVec(a["c_re"], a["c_im"]),
            a["d"],
            a["log_dt"],
        )
        params = cls(a["enc_w"], a["enc_b"], ssm, a["dec_w"], a["dec_b"])
        params.validate()
        return params

    def validate(self) -> None:
        n_in, h, n, n_out = self.dims
        expected = ModelConfig(n_in, h, n, n_out).shapes()
        for name, arr in self.arrays().items():
            if arr.shape != expected[name]:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays({k: v.copy() for k, v in self.arrays().items()})


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Random initialization.

    Poles start at Re A = -1/2 with linearly spaced frequencies pi*n; the
    sampling step is log-uniform in [1e-3, 1e-1]; B starts at 1.
    """
    rng = np.random.default_rng(seed)
    h, n = config.measurement_dim, config.state_dim
    bound_in = 1.0 / np.sqrt(config.input_dim)
    bound_h = 1.0 / np.sqrt(h)
    c_std = _c_init_std(config)
    arrays = {
        "enc_w": rng.uniform(-bound_in, bound_in, (h, config.input_dim)),
        "enc_b": rng.uniform(-bound_in, bound_in, h),
        "log_a_re": np.full((h, n), np.log(0.5)),
        "a_im": np.broadcast_to(np.pi * np.arange(n), (h, n)).copy(),
        "b_re": np.ones((h, n)),
        "b_im": np.zeros((h, n)),
        "c_re": rng.normal(0.0, c_std, (h, n)),
        "c_im": rng.normal(0.0, c_std, (h, n)),
        "d": rng.normal(0.0, 1.0, h),
        "log_dt": rng.uniform(np.log(1e-3), np.log(1e-1), h),
        "dec_w": rng.uniform(-bound_h, bound_h, (config.output_dim, h)),
        "dec_b": np.zeros(config.output_dim),
    }
    return ModelParams.from_arrays(arrays)


def _c_init_std(config: ModelConfig) -> float:
    return float(np.sqrt(0.5 / config.state_dim))


def conv_taps(ssm, variant, L: int) -> np.ndarray:
    """Per-channel taps the layer convolves with, shape (H, L).

    The gated kernel is a continuous-time response sampled at t = l*dt, so
    its samples are weighted by dt (rectangle rule for the convolution
    integral). The Vandermonde kernel already carries dt through ZOH.
    """
    k = kernelgen.materialize(ssm, variant, L).values
    if KernelVariant.parse(variant) is KernelVariant.S4CONVD_ADAPTIVE:
        k = np.exp(ssm.log_dt)[:, None] * k
    return k


def conv_taps_vjp(ssm, variant, L: int, grad_taps: np.ndarray) -> dict:
    variant = KernelVariant.parse(variant)
    if variant is KernelVariant.S4D_VANDERMONDE:
        return kernelgen.materialize_vjp(ssm, variant, L, grad_taps)
    dt = np.exp(ssm.log_dt)
    k = kernelgen.materialize(ssm, variant, L).values
    grads = kernelgen.materialize_vjp(ssm, variant, L, dt[:, None] * grad_taps)
    grads["log_dt"] = grads["log_dt"] + dt * (k * grad_taps).sum(axis=-1)
    return grads


def gelu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(GELU_SCALE * x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(GELU_SCALE * x)
    return s + GELU_SCALE * x * s * (1.0 - s)


def dropout_mask(shape: tuple, p: float, rng_seed) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    if p <= 0.0:
        return np.ones(shape)
    rng = np.random.default_rng(rng_seed)
    return (rng.random(shape) >= p) / (1.0 - p)


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by the {name} layer")
    return arr


@dataclass
class ForwardCache:
    x: np.ndarray
    v: np.ndarray  # encoder output, (B, H, L)
    s: np.ndarray  # pre-activation SSM output
    act: np.ndarray  # post-activation, post-dropout
    mask: np.ndarray | None
    conv: seqconv.ConvCache | None = field(default=None)


def _inputs(batch, config: ModelConfig | None, params: ModelParams) -> np.ndarray:
    x = batch.data if isinstance(batch, SequenceBatch) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 3:
        raise ValidationError(f"batch must be (B, L, F), got shape {x.shape}")
    if x.shape[2] != params.enc_w.shape[1]:
        raise ValidationError(
            f"batch has {x.shape[2]} features, model expects {params.enc_w.shape[1]}"
        )
    if not np.all(np.isfinite(x)):
        raise ValidationError("input batch contains non-finite values")
    return x


def _encode(params: ModelParams, x: np.ndarray) -> np.ndarray:
    v = x @ params.enc_w.T + params.enc_b
    return _finite("encoder", v).transpose(0, 2, 1).copy()


def _head(params: ModelParams, s: np.ndarray, p: float, train_mode: bool, rng_seed):
    a = _finite("activation", gelu(s))
    mask = None
    if train_mode and p > 0.0:
        mask = dropout_mask(a.shape, p, rng_seed)
        a = a * mask
    out = a.transpose(0, 2, 1) @ params.dec_w.T + params.dec_b
    return _finite("decoder", out), a, mask


def forward_cached(
    params: ModelParams,
    batch,
    config: ModelConfig,
    train_mode: bool = False,
    rng_seed=0,
) -> tuple[np.ndarray, ForwardCache]:
    x = _inputs(batch, config, params)
    length = x.shape[1]
    # overflow is reported by the per-layer finiteness checks instead
    with np.errstate(over="ignore", invalid="ignore"):
        v = _encode(params, x)
        try:
            k = conv_taps(params.ssm, config.kernel_variant, length)
            conv, conv_cache = seqconv.batched_conv_cached(v, k, seqconv.ConvPlan.for_length(length))
        except NumericalError as exc:
            raise NumericalError(f"non-finite values produced by the ssm layer ({exc})") from exc
        s = _finite("ssm", conv + params.ssm.d[:, None] * v)
        out, a, mask = _head(params, s, config.dropout_p, train_mode, rng_seed)
    return out, ForwardCache(x, v, s, a, mask, conv_cache)


def forward(params: ModelParams, batch, config: ModelConfig, train_mode: bool = False, rng_seed=0) -> np.ndarray:
    """(B, L, input_dim) -> (B, L, output_dim), log1p-space output."""
    return forward_cached(params, batch, config, train_mode, rng_seed)[0]


def forward_recurrent(params: ModelParams, batch, config: ModelConfig) -> np.ndarray:
    """Step-by-step evaluation of the discretized recurrence (Vandermonde variant, eval mode)."""
    if config.kernel_variant is not KernelVariant.S4D_VANDERMONDE:
        raise ValidationError("the recurrent form exists only for the Vandermonde kernel")
    x = _inputs(batch, config, params)
    v = _encode(params, x)
    a_disc, b_disc = kernelgen.discretized(params.ssm)
    c = params.ssm.c.to_complex()
    state = np.zeros(v.shape[:2] + (a_disc.shape[-1],), dtype=np.complex128)
    s = np.empty_like(v)
    for ell in range(v.shape[2]):
        state = a_disc * state + b_disc * v[:, :, ell, None]
        s[:, :, ell] = (c * state).sum(axis=-1).real
    s = s + params.ssm.d[:, None] * v
    return _head(params, s, 0.0, False, 0)[0]


def predict(params: ModelParams, batch, config: ModelConfig) -> np.ndarray:
    """Predictions in meter units: expm1 of the log-space output, clamped at zero."""
    return to_meter_units(forward(params, batch, config))


def to_meter_units(log_output: np.ndarray) -> np.ndarray:
    return np.maximum(np.expm1(log_output), 0.0)


def save_checkpoint(params: ModelParams, path) -> None:
    """Flat little-endian binary: magic, four u32 dims, f64 arrays in field order."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<4I", *params.dims))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(params.arrays()[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if raw[:head] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic {raw[:head]!r})")
    if len(raw) < head + 16:
        raise ValidationError(f"{path}: truncated header")
    dims = struct.unpack("<4I", raw[head : head + 16])
    shapes = ModelConfig(*dims).shapes()
    offset = head + 16
    arrays = {}
    for name in PARAM_NAMES:
        count = int(np.prod(shapes[name]))
        chunk = raw[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ValidationError(f"{path}: truncated while reading {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shapes[name]).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValidationError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams.from_arrays(arrays)
