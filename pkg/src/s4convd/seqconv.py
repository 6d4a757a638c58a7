"""Causal convolution of sequences with materialized kernels."""
from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import fft as _fft
from .core import Kernel, NumericalError, ValidationError


class ConvMode(str, enum.Enum):
    FFT = "fft"
    DIRECT = "direct"


@dataclass(frozen=True)
class ConvPlan:
    fft_length: int
    mode: ConvMode = ConvMode.FFT

    def __post_init__(self):
        n = self.fft_length
        if n < 2 or n & (n - 1):
            raise ValidationError(f"fft_length must be a power of two >= 2, got {n}")
        object.__setattr__(self, "mode", ConvMode(self.mode))

    @classmethod
    def for_length(cls, length: int, mode=ConvMode.FFT) -> "ConvPlan":
        return cls(_fft.next_pow2(2 * length), mode)

    def check(self, length: int) -> None:
        if self.fft_length < 2 * length:
            raise ValidationError(
                f"fft_length {self.fft_length} < 2*L = {2 * length}: circular wrap-around"
            )


def max_workers() -> int:
    """Thread cap from ``S4CD_THREADS`` (defaults to the hardware count)."""
    env = os.environ.get("S4CD_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _kernel_values(k, channels: int | None = None) -> np.ndarray:
    values = k.values if isinstance(k, Kernel) else np.atleast_2d(np.asarray(k, dtype=np.float64))
    if channels is not None and values.shape[0] != channels:
        raise ValidationError(f"kernel has {values.shape[0]} channels, expected {channels}")
    return values


def _check_output(y: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise NumericalError("convolution output is not finite (overflow?)")
    return y


def direct_conv(u: np.ndarray, k: np.ndarray) -> np.ndarray:
    """O(L^2) reference: ``y_l = sum_{m<=l} k_m u_{l-m}`` on the last axis."""
    length = u.shape[-1]
    y = np.zeros(np.broadcast_shapes(u.shape, k.shape), dtype=np.float64)
    for ell in range(length):
        y[..., ell] = (k[..., : ell + 1] * u[..., ell::-1]).sum(axis=-1)
    return y


def causal_conv(u, k, plan: ConvPlan) -> np.ndarray:
    """Causal convolution of a single real sequence with a 1-channel kernel."""
    u = np.asarray(u, dtype=np.float64)
    kv = _kernel_values(k, 1)[0]
    if u.ndim != 1 or u.shape[0] != kv.shape[0]:
        raise ValidationError(f"length mismatch: u{u.shape} vs kernel length {kv.shape[0]}")
    if not np.all(np.isfinite(u)):
        raise ValidationError("input sequence contains non-finite values")
    if plan.mode is ConvMode.DIRECT:
        return _check_output(direct_conv(u, kv))
    plan.check(u.shape[0])
    n = plan.fft_length
    y = _fft.irfft(_fft.rfft(u, n) * _fft.rfft(kv, n), n)
    return _check_output(y[: u.shape[0]].copy())


@dataclass
class ConvCache:
    """Spectra kept from the forward pass for the backward correlation."""

    u_hat: np.ndarray
    k_hat: np.ndarray
    length: int
    plan: ConvPlan


def _row_chunks(n_rows: int, workers: int) -> list[slice]:
    if workers <= 1 or n_rows < 2:
        return [slice(0, n_rows)]
    step = -(-n_rows // workers)
    return [slice(i, min(i + step, n_rows)) for i in range(0, n_rows, step)]


def _map_rows(fn, n_rows: int):
    chunks = _row_chunks(n_rows, max_workers())
    if len(chunks) == 1:
        return [fn(chunks[0])]
    with ThreadPoolExecutor(len(chunks)) as pool:
        return list(pool.map(fn, chunks))


def batched_conv_cached(batch: np.ndarray, k_values: np.ndarray, plan: ConvPlan):
    """FFT convolution of ``(B, H, L)`` rows with ``(H, L)`` kernels, returning the cache."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3:
        raise ValidationError(f"batch must be (B, H, L), got {batch.shape}")
    n_b, n_h, length = batch.shape
    if k_values.shape != (n_h, length):
        raise ValidationError(f"kernel shape {k_values.shape} does not match batch {batch.shape}")
    plan.check(length)
    n = plan.fft_length
    k_hat = _fft.rfft(k_values, n)
    u_hat = np.empty((n_b, n_h, n // 2 + 1), dtype=np.complex128)
    y = np.empty_like(batch)

    def run(rows: slice):
        u_hat[rows] = _fft.rfft(batch[rows], n)
        y[rows] = _fft.irfft(u_hat[rows] * k_hat, n)[..., :length]

    _map_rows(run, n_b)
    return _check_output(y), ConvCache(u_hat, k_hat, length, plan)


def batched_conv(batch, kernels, plan: ConvPlan) -> np.ndarray:
    """Convolve every ``(b, h)`` row with kernel row ``h``."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3:
        raise ValidationError(f"batch must be (B, H, L), got {batch.shape}")
    kv = _kernel_values(kernels, batch.shape[1])
    if plan.mode is ConvMode.DIRECT:
        if kv.shape[1] != batch.shape[2]:
            raise ValidationError("kernel length does not match sequence length")
        return _check_output(direct_conv(batch, kv[None]))
    y, _ = batched_conv_cached(batch, kv, plan)
    return y


def batched_conv_vjp(cache: ConvCache, grad_y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_y * conv(u, k))`` with respect to ``u`` and ``k``.

    Both are cross-correlations; padding to at least 2L keeps the circular
    lags from wrapping into the causal window.
    """
    length, n = cache.length, cache.plan.fft_length
    g_hat = _fft.rfft(grad_y, n)
    grad_u = _fft.irfft(g_hat * np.conj(cache.k_hat), n)[..., :length]
    grad_k = _fft.irfft((g_hat * np.conj(cache.u_hat)).sum(axis=0), n)[..., :length]
    return grad_u, grad_k
