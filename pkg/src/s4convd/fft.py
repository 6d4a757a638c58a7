"""Iterative radix-2 Cooley-Tukey FFT.

Internally the transform axis is moved to the front so every butterfly stage
is a handful of contiguous vector operations across all rows at once. Real
sequences go through a half-length complex transform of the even/odd
samples followed by an untangling step; each row's result depends only on
that row.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .core import ValidationError


def next_pow2(n: int) -> int:
    if n < 1:
        raise ValidationError(f"length must be positive, got {n}")
    return 1 << (n - 1).bit_length()


def _check_pow2(n: int) -> None:
    if n < 1 or n & (n - 1):
        raise ValidationError(f"radix-2 FFT needs a power-of-two length, got {n}")


@lru_cache(maxsize=64)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=64)
def _twiddles(n: int) -> np.ndarray:
    tw = np.exp(-2j * np.pi * np.arange(max(n // 2, 1)) / n)
    tw.setflags(write=False)
    return tw


def _fft_cols(a: np.ndarray) -> np.ndarray:
    """Forward DFT along axis 0 of a 2-D ``(n, rows)`` complex array."""
    n, rows = a.shape
    a = a[_bit_reverse(n)]
    b = np.empty_like(a)
    tw = _twiddles(n)
    half = 1
    while half < n:
        m = 2 * half
        src = a.reshape(n // m, 2, half, rows)
        dst = b.reshape(n // m, 2, half, rows)
        even, odd = src[:, 0], src[:, 1]
        if half > 1:
            np.multiply(odd, tw[:: n // m][:, None], out=odd)
        np.add(even, odd, out=dst[:, 0])
        np.subtract(even, odd, out=dst[:, 1])
        a, b = b, a
        half = m
    return a


def _to_cols(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    lead = x.shape[:-1]
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]).T), lead


def _from_cols(a: np.ndarray, lead: tuple) -> np.ndarray:
    return np.ascontiguousarray(a.T).reshape(lead + (a.shape[0],))


def fft(x) -> np.ndarray:
    """Forward DFT of the last axis; its length must be a power of two."""
    x = np.asarray(x, dtype=np.complex128)
    _check_pow2(x.shape[-1])
    cols, lead = _to_cols(x)
    return _from_cols(_fft_cols(cols), lead)


def ifft(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    return np.conj(fft(np.conj(x))) / n


@lru_cache(maxsize=64)
def _half_twiddles(n: int) -> np.ndarray:
    tw = np.exp(-2j * np.pi * np.arange(n // 2 + 1) / n)[:, None]
    tw.setflags(write=False)
    return tw


def rfft(x, n: int | None = None) -> np.ndarray:
    """DFT of a real last axis zero-padded to ``n``; returns the ``n//2 + 1`` non-negative bins."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1] if n is None else n
    _check_pow2(n)
    if x.shape[-1] > n:
        raise ValidationError(f"signal length {x.shape[-1]} exceeds transform length {n}")
    if n == 1:
        return x[..., :1].astype(np.complex128)
    h = n // 2
    cols, lead = _to_cols(x)
    z = np.zeros((h, cols.shape[1]), dtype=np.complex128)
    even, odd = cols[0::2], cols[1::2]
    z.real[: even.shape[0]] = even
    z.imag[: odd.shape[0]] = odd
    zf = _fft_cols(z)
    zk = np.concatenate((zf, zf[:1]), axis=0)  # Z[k] for k = 0..h
    zr = np.conj(zk[::-1])  # conj(Z[h - k]) == conj(Z[-k])
    e = 0.5 * (zk + zr)
    o = -0.5j * (zk - zr)
    return _from_cols(e + _half_twiddles(n) * o, lead)


def irfft(spec, n: int) -> np.ndarray:
    """Inverse of :func:`rfft` for a real signal of transform length ``n``."""
    spec = np.asarray(spec, dtype=np.complex128)
    _check_pow2(n)
    if spec.shape[-1] != n // 2 + 1:
        raise ValidationError(f"expected {n // 2 + 1} bins, got {spec.shape[-1]}")
    if n == 1:
        return spec.real.copy()
    h = n // 2
    cols, lead = _to_cols(spec)
    xr = np.conj(cols[::-1])  # conj(X[h - k])
    e = 0.5 * (cols + xr)[:h]
    o = (0.5 * (cols - xr) * np.conj(_half_twiddles(n)))[:h]
    z = np.conj(_fft_cols(np.conj(e + 1j * o))) / h
    out = np.empty((n, cols.shape[1]), dtype=np.float64)
    out[0::2] = z.real
    out[1::2] = z.imag
    return _from_cols(out, lead)
