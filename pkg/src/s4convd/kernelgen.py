"""Convolution kernels from diagonal SSM parameters.

Two kernel families are provided:

* the Vandermonde kernel ``K_l = Re sum_n C_n A_n**l B_n`` for an already
  discretized system, and
* the sigmoid-gated adaptive kernel
  ``K_l = Re sum_n C_n * (sig(Re z) + i sig(Im z))`` with
  ``z = exp(l * dt * A_n) * B_n``.

Complex gradients follow the convention ``G = dL/dRe + i dL/dIm``; for a
holomorphic map ``w = f(z)`` this gives ``G_z = conj(f'(z)) * G_w``.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    ComplexVec,
    DiagonalSSMParams,
    Kernel,
    NumericalError,
    ValidationError,
    materialize_a,
    zoh_discretize,
)


class KernelVariant(str, enum.Enum):
    S4D_VANDERMONDE = "s4d"
    S4CONVD_ADAPTIVE = "s4convd"

    @classmethod
    def parse(cls, value) -> "KernelVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {
            "s4d": cls.S4D_VANDERMONDE,
            "s4d_vandermonde": cls.S4D_VANDERMONDE,
            "vandermonde": cls.S4D_VANDERMONDE,
            "s4convd": cls.S4CONVD_ADAPTIVE,
            "s4convd_adaptive": cls.S4CONVD_ADAPTIVE,
            "adaptive": cls.S4CONVD_ADAPTIVE,
        }
        if key not in aliases:
            raise ValidationError(f"unknown kernel variant {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class KernelSpec:
    variant: KernelVariant
    length: int
    state_dim: int

    def __post_init__(self):
        object.__setattr__(self, "variant", KernelVariant.parse(self.variant))
        if self.length < 1 or self.state_dim < 1:
            raise ValidationError("kernel length and state dimension must be >= 1")


def sigmoid(x):
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_triplet(a: ComplexVec, b: ComplexVec, c: ComplexVec, length: int) -> None:
    if length < 1:
        raise ValidationError(f"kernel length must be >= 1, got {length}")
    if not (a.shape == b.shape == c.shape):
        raise ValidationError(
            f"dimension mismatch: A{a.shape} B{b.shape} C{c.shape}"
        )


def _as_kernel(values: np.ndarray) -> Kernel:
    values = np.atleast_2d(values)
    if not np.all(np.isfinite(values)):
        raise NumericalError("kernel materialization produced non-finite values")
    return Kernel(values)


def vandermonde(a: np.ndarray, length: int) -> np.ndarray:
    """Powers ``a[..., n] ** l`` for l < length, shape ``(..., N, length)``.

    Built by repeated multiplication so that ``0**0 == 1`` and the entries
    match the state recurrence step for step.
    """
    a = np.asarray(a, dtype=np.complex128)
    steps = np.empty(a.shape + (length,), dtype=np.complex128)
    steps[..., 0] = 1.0
    steps[..., 1:] = a[..., None]
    return np.cumprod(steps, axis=-1)


def mode_sum(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sum over the mode axis of ``w[n] * v[n, l]``; modes accumulate in ascending order."""
    return (w[..., :, None] * v).sum(axis=-2)


def s4d_kernel_array(a_disc: np.ndarray, w: np.ndarray, length: int) -> np.ndarray:
    """Vandermonde kernel for complex arrays; ``w`` is the elementwise product B*C."""
    return mode_sum(w, vandermonde(a_disc, length)).real


def s4d_kernel(a_discrete: ComplexVec, b: ComplexVec, c: ComplexVec, L: int) -> Kernel:
    """Materialize ``K = (B * C) . VL(A)`` and keep the real part."""
    _check_triplet(a_discrete, b, c, L)
    a = a_discrete.to_complex()
    if np.any(np.abs(a) > 1.0):
        warnings.warn("discrete poles with |A| > 1 give a growing kernel", RuntimeWarning)
    w = b.to_complex() * c.to_complex()
    return _as_kernel(s4d_kernel_array(a, w, L))


def s4d_kernel_vjp(a_disc: np.ndarray, w: np.ndarray, length: int, grad_k: np.ndarray):
    """Pull ``dLoss/dK`` back to complex gradients on the discrete poles and weights."""
    v = vandermonde(a_disc, length)
    g = grad_k[..., None, :]
    grad_w = (g * np.conj(v)).sum(axis=-1)
    ell = np.arange(1, length, dtype=np.float64)
    # d(A**l)/dA = l * A**(l-1)
    dv = ell * v[..., :-1]
    grad_a = (g[..., 1:] * np.conj(w[..., None] * dv)).sum(axis=-1)
    return grad_a, grad_w


def ssm_recurrence_impulse(a_discrete: ComplexVec, b: ComplexVec, c: ComplexVec, L: int) -> Kernel:
    """Impulse response obtained by stepping the state recurrence.

    The state absorbs the input at the same step it is read out:
    ``x_l = A x_{l-1} + B u_l`` and ``y_l = Re(C . x_l)``, so ``y_0 = Re(C B)``.
    """
    _check_triplet(a_discrete, b, c, L)
    a, bb, cc = a_discrete.to_complex(), b.to_complex(), c.to_complex()
    x = np.zeros(a.shape, dtype=np.complex128)
    out = np.empty(a.shape[:-1] + (L,), dtype=np.float64)
    for ell in range(L):
        u = 1.0 if ell == 0 else 0.0
        x = a * x + bb * u
        out[..., ell] = (cc * x).sum(axis=-1).real
    return _as_kernel(out)


def _adaptive_parts(params: DiagonalSSMParams, length: int):
    a = materialize_a(params).to_complex()
    dt = np.exp(params.log_dt)[..., None, None]
    t = np.arange(length, dtype=np.float64) * dt
    e = np.exp(t * a[..., None])
    z = e * params.b.to_complex()[..., None]
    return a, dt, t, e, z


def s4convd_kernel(params: DiagonalSSMParams, L: int) -> Kernel:
    """Sigmoid-gated adaptive kernel sampled at ``t_l = l * exp(log_dt)``.

    The gate is applied to the real and imaginary planes separately and the
    C-weighted sum is reduced to its real part.
    """
    if L < 1:
        raise ValidationError(f"kernel length must be >= 1, got {L}")
    _, _, _, _, z = _adaptive_parts(params, L)
    gate = sigmoid(z.real) + 1j * sigmoid(z.imag)
    return _as_kernel(mode_sum(params.c.to_complex(), gate).real)


def s4convd_kernel_vjp(params: DiagonalSSMParams, length: int, grad_k: np.ndarray) -> dict:
    """Gradients of ``sum(grad_k * K)`` with respect to every SSM field used by the kernel."""
    a, dt, t, e, z = _adaptive_parts(params, length)
    c = params.c.to_complex()
    b = params.b.to_complex()
    s_re, s_im = sigmoid(z.real), sigmoid(z.imag)
    g = grad_k[..., None, :]

    grad_c = (g * (s_re - 1j * s_im)).sum(axis=-1)
    # K = C_re*s_re - C_im*s_im, then through the sigmoid on each plane
    gz = g * (c.real[..., None] * s_re * (1.0 - s_re) - 1j * c.imag[..., None] * s_im * (1.0 - s_im))
    grad_b = (np.conj(e) * gz).sum(axis=-1)
    ge = np.conj(b)[..., None] * gz
    grad_a = (np.conj(t * e) * ge).sum(axis=-1)
    grad_dt = np.real(np.conj(t / dt * a[..., None] * e) * ge).sum(axis=(-2, -1))
    dt = dt[..., 0, 0]
    return {
        "log_a_re": grad_a.real * (-np.exp(params.log_a_re)),
        "a_im": grad_a.imag,
        "b_re": grad_b.real,
        "b_im": grad_b.imag,
        "c_re": grad_c.real,
        "c_im": grad_c.imag,
        "log_dt": grad_dt * dt,
    }


def discretized(params: DiagonalSSMParams) -> tuple[np.ndarray, np.ndarray]:
    """ZOH-discretized poles and input weights for the Vandermonde path."""
    a = materialize_a(params).to_complex()
    return zoh_discretize(a, params.b.to_complex(), np.exp(params.log_dt))


def s4d_kernel_from_params(params: DiagonalSSMParams, L: int) -> Kernel:
    a_disc, b_disc = discretized(params)
    return s4d_kernel(ComplexVec.from_complex(a_disc), ComplexVec.from_complex(b_disc), params.c, L)


def s4d_params_vjp(params: DiagonalSSMParams, length: int, grad_k: np.ndarray) -> dict:
    """Chain ``s4d_kernel_vjp`` back through the ZOH discretization to raw parameters."""
    a = materialize_a(params).to_complex()
    dt = np.exp(params.log_dt)[..., None]
    a_disc = np.exp(dt * a)
    e = (a_disc - 1.0) / a
    b, c = params.b.to_complex(), params.c.to_complex()
    w = c * e * b

    g_adisc, g_w = s4d_kernel_vjp(a_disc, w, length, grad_k)
    grad_c = np.conj(e * b) * g_w
    grad_b = np.conj(c * e) * g_w
    g_e = np.conj(c * b) * g_w

    # A_disc = exp(dt A); E = (A_disc - 1) / A
    de_da = (dt * a_disc * a - (a_disc - 1.0)) / a**2
    grad_a = np.conj(dt * a_disc) * g_adisc + np.conj(de_da) * g_e
    grad_dt = np.real(np.conj(a * a_disc) * g_adisc + np.conj(a_disc) * g_e).sum(axis=-1)
    return {
        "log_a_re": grad_a.real * (-np.exp(params.log_a_re)),
        "a_im": grad_a.imag,
        "b_re": grad_b.real,
        "b_im": grad_b.imag,
        "c_re": grad_c.real,
        "c_im": grad_c.imag,
        "log_dt": grad_dt * dt[..., 0],
    }


def materialize(params: DiagonalSSMParams, variant, L: int) -> Kernel:
    variant = KernelVariant.parse(variant)
    if variant is KernelVariant.S4D_VANDERMONDE:
        return s4d_kernel_from_params(params, L)
    return s4convd_kernel(params, L)


def materialize_vjp(params: DiagonalSSMParams, variant, L: int, grad_k: np.ndarray) -> dict:
    variant = KernelVariant.parse(variant)
    if variant is KernelVariant.S4D_VANDERMONDE:
        return s4d_params_vjp(params, L, grad_k)
    return s4convd_kernel_vjp(params, L, grad_k)
