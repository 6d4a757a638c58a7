"""Numeric value types shared by the kernel, convolution and model code.

Complex quantities are stored as split real/imaginary planes. Parameter
containers accept either a single channel (arrays of shape ``(N,)``) or a
stack of channels (``(H, N)``); every function downstream broadcasts over the
leading axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a shape or finiteness contract."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces NaN or infinite values."""


def _as_f64(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class ComplexVec:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re, im = _as_f64(self.re), _as_f64(self.im)
        if re.shape != im.shape:
            raise ValidationError(
                f"real/imaginary planes differ in shape: {re.shape} vs {im.shape}"
            )
        check_finite("ComplexVec", re)
        check_finite("ComplexVec", im)
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_complex(cls, z) -> "ComplexVec":
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    @property
    def shape(self) -> tuple:
        return self.re.shape

    def __len__(self) -> int:
        return self.re.shape[-1]


@dataclass(frozen=True)
class DiagonalSSMParams:
    """Diagonal state-space system, one or more channels.

    ``log_a_re`` holds log(-Re A) so the continuous poles always decay.
    ``d`` is the feed-through gain and ``log_dt`` the log sampling step.
    """

    log_a_re: np.ndarray
    a_im: np.ndarray
    b: ComplexVec
    c: ComplexVec
    d: np.ndarray
    log_dt: np.ndarray

    def __post_init__(self):
        log_a_re, a_im = _as_f64(self.log_a_re), _as_f64(self.a_im)
        d, log_dt = _as_f64(self.d), _as_f64(self.log_dt)
        shape = log_a_re.shape
        if not shape:
            raise ValidationError("state dimension must be at least 1")
        for name, arr in (("a_im", a_im), ("b", self.b), ("c", self.c)):
            if arr.shape != shape:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
        for name, arr in (("d", d), ("log_dt", log_dt)):
            if arr.shape != shape[:-1]:
                raise ValidationError(
                    f"{name} has shape {arr.shape}, expected {shape[:-1]}"
                )
        for name, arr in (("log_a_re", log_a_re), ("a_im", a_im), ("d", d), ("log_dt", log_dt)):
            check_finite(name, arr)
        object.__setattr__(self, "log_a_re", log_a_re)
        object.__setattr__(self, "a_im", a_im)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "log_dt", log_dt)

    @property
    def state_dim(self) -> int:
        return self.log_a_re.shape[-1]

    def channel(self, h: int) -> "DiagonalSSMParams":
        return DiagonalSSMParams(
            self.log_a_re[h],
            self.a_im[h],
            ComplexVec(self.b.re[h], self.b.im[h]),
            ComplexVec(self.c.re[h], self.c.im[h]),
            self.d[h],
            self.log_dt[h],
        )


@dataclass(frozen=True)
class Kernel:
    values: np.ndarray  # (channels, length)

    def __post_init__(self):
        values = _as_f64(self.values)
        if values.ndim != 2:
            raise ValidationError(f"kernel must be 2-D (channels, length), got {values.shape}")
        if values.shape[1] < 1:
            raise ValidationError("kernel length must be at least 1")
        if not np.all(np.isfinite(values)):
            raise NumericalError("kernel contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SequenceBatch:
    data: np.ndarray  # (batch, length, features)
    timestamps: np.ndarray | None = None  # epoch-hours, (batch, length)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValidationError(f"batch must be (B, L, F), got shape {data.shape}")
        if data.shape[1] < 1:
            raise ValidationError("sequence length must be at least 1")
        object.__setattr__(self, "data", data)


def complex_exp(z: complex) -> complex:
    """e**z for a scalar, written out from its polar form."""
    z = complex(z)
    mag = math.exp(z.real)
    return complex(mag * math.cos(z.imag), mag * math.sin(z.imag))


def materialize_a(params: DiagonalSSMParams) -> ComplexVec:
    """Continuous diagonal state matrix: A = -exp(log_a_re) + i a_im.

    Non-finite parameters are a validation error; a finite ``log_a_re`` too
    large to exponentiate is a numerical error.
    """
    check_finite("log_a_re", params.log_a_re)
    check_finite("a_im", params.a_im)
    with np.errstate(over="ignore"):
        re = -np.exp(params.log_a_re)
    if not np.all(np.isfinite(re)):
        raise NumericalError("exp(log_a_re) overflows")
    return ComplexVec(re, params.a_im)


def zoh_discretize(a: np.ndarray, b: np.ndarray, dt) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold on a diagonal system (complex arrays, dt broadcast on the last axis)."""
    dt = np.asarray(dt, dtype=np.float64)[..., None]
    a_disc = np.exp(dt * a)
    b_disc = (a_disc - 1.0) / a * b
    return a_disc, b_disc


__all__ = [
    "ComplexVec",
    "DiagonalSSMParams",
    "Kernel",
    "SequenceBatch",
    "NumericalError",
    "ValidationError",
    "check_finite",
    "complex_exp",
    "materialize_a",
    "zoh_discretize",
]
