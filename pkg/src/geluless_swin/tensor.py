"""Dense float / int8 kernels, symmetric quantization, and nonlinearities.

Float tensors are plain numpy arrays (float32 by default; float64 is accepted
everywhere so gradient checks can replay the same code in double precision).
Integer tensors carry their scale explicitly in :class:`QuantTensor`.

Quantization is symmetric per-tensor with zero-point 0 and range [-127, 127].
Rounding is half-away-from-zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np
from scipy.special import erf

from .errors import ParameterError, ShapeError

QMAX = 127

# int8 x int8 partial sums stay below 2**24 while K <= 1040, so a float32 GEMM
# is exact there; above that, float64 is exact up to K ~ 5.5e8.
_F32_EXACT_K = (2**24) // (QMAX * QMAX)


@dataclass
class QuantTensor:
    data: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise ParameterError(f"quantization scale must be finite and > 0, got {self.scale}")
        if self.data.dtype != np.int8:
            raise ParameterError(f"QuantTensor payload must be int8, got {self.data.dtype}")

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class AccTensor:
    """int32 GEMM accumulators."""

    data: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.data.shape


def _float_dtype(*arrays) -> np.dtype:
    if any(np.asarray(a).dtype == np.float64 for a in arrays):
        return np.dtype(np.float64)
    return np.dtype(np.float32)


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
    return np.ascontiguousarray(arr, dtype=dtype)


# --------------------------------------------------------------------------
# GEMMs
# --------------------------------------------------------------------------


def matmul_f32(a, b) -> np.ndarray:
    """Reference float GEMM with a fixed accumulation order.

    Every output element is ``sum_k a[i,k]*b[k,j]`` accumulated in ascending
    ``k``, with one rounding per multiply and per add (no FMA contraction), so
    results are bit-identical to a scalar triple loop.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul_f32: cannot multiply {list(a.shape)} by {list(b.shape)}")
    dtype = _float_dtype(a, b)
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def _check_inner(a_shape, b_shape, name):
    if len(a_shape) < 2 or len(b_shape) < 2 or a_shape[-1] != b_shape[-2]:
        raise ShapeError(f"{name}: cannot multiply {list(a_shape)} by {list(b_shape)}")


def matmul_int8_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact int32 product of int8 arrays (leading dims broadcast like ``np.matmul``)."""
    _check_inner(a.shape, b.shape, "matmul_i8")
    k = a.shape[-1]
    ftype = np.float32 if k <= _F32_EXACT_K else np.float64
    return np.matmul(a.astype(ftype), b.astype(ftype)).astype(np.int32)


def matmul_i8(a: QuantTensor, b: QuantTensor) -> AccTensor:
    """int8 x int8 -> int32 GEMM.

    The dequantized value of an output element is ``a.scale * b.scale * acc``.
    """
    return AccTensor(matmul_int8_raw(a.data, b.data))


# --------------------------------------------------------------------------
# Quantization
# --------------------------------------------------------------------------


def round_half_away(y: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (exact for any float input)."""
    mag = np.abs(y)
    whole = np.floor(mag)
    mag_rounded = whole + (mag - whole >= 0.5)
    return np.copysign(mag_rounded, y)


def quantize_array(x: np.ndarray, scale: float) -> np.ndarray:
    if not scale > 0:
        raise ParameterError(f"quantize: scale must be > 0, got {scale}")
    y = np.asarray(x, dtype=np.float64) / float(scale)
    q = np.clip(round_half_away(y), -QMAX, QMAX)
    return q.astype(np.int8)


def quantize(x, scale: float) -> QuantTensor:
    """``clamp(round_half_away(x / scale), -127, 127)`` as int8."""
    return QuantTensor(quantize_array(x, scale), float(scale))


def dequantize(q: QuantTensor) -> np.ndarray:
    return (q.data.astype(np.float32) * np.float32(q.scale)).astype(np.float32)


def calibrate_scale(samples: Iterable) -> float:
    """Max-abs calibration: ``max|x| / 127`` over all samples, 1.0 if everything is zero."""
    samples = list(samples)
    if not samples:
        raise ParameterError("calibrate_scale needs at least one sample")
    maxabs = max(float(np.max(np.abs(np.asarray(s)), initial=0.0)) for s in samples)
    return scale_from_maxabs(maxabs)


def scale_from_maxabs(maxabs: float) -> float:
    if maxabs == 0.0:
        return 1.0
    return float(np.float32(maxabs / QMAX))


def fixed_point_multiplier(fold: float) -> tuple[int, int]:
    """Decompose ``fold`` as ``m * 2**-shift`` with a 31-bit integer ``m``."""
    if not fold > 0:
        raise ParameterError(f"requantization fold must be > 0, got {fold}")
    mant, exp = math.frexp(fold)  # fold = mant * 2**exp, mant in [0.5, 1)
    m = int(round(mant * (1 << 31)))
    shift = 31 - exp
    if m == 1 << 31:
        m >>= 1
        shift -= 1
    return m, shift


def requantize(acc: np.ndarray, fold: float) -> np.ndarray:
    """Map int32 accumulators to int8 with an integer-only fixed-point multiply.

    Equivalent to ``clamp(round_half_away(acc * fold))`` up to the 2**-31
    relative error of the multiplier.
    """
    m, shift = fixed_point_multiplier(fold)
    prod = acc.astype(np.int64) * m
    if shift <= 0:
        out = prod << (-shift)
    elif shift > 62:
        out = np.zeros_like(prod)
    else:
        half = np.int64(1) << (shift - 1)
        mag = (np.abs(prod) + half) >> shift
        out = np.where(prod < 0, -mag, mag)
    return np.clip(out, -QMAX, QMAX).astype(np.int8)


def relu_requantize(acc: np.ndarray, fold: float) -> np.ndarray:
    """``requantize(relu(acc), fold)`` specialised for the non-negative range."""
    m, shift = fixed_point_multiplier(fold)
    if not 1 <= shift <= 62:
        return requantize(np.maximum(acc, 0), fold)
    prod = np.maximum(acc, 0).astype(np.int64)
    prod *= m
    prod += np.int64(1) << (shift - 1)
    prod >>= shift
    np.minimum(prod, QMAX, out=prod)
    return prod.astype(np.int8)


# --------------------------------------------------------------------------
# Nonlinearities
# --------------------------------------------------------------------------


def layernorm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize over the last axis using the biased variance."""
    if not eps > 0:
        raise ParameterError(f"layernorm eps must be > 0, got {eps}")
    x = as_tensor(x)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layernorm: channel dim {c} does not match gamma {list(gamma.shape)} / beta {list(beta.shape)}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    out = centered / np.sqrt(var + x.dtype.type(eps))
    return (out * gamma + beta).astype(x.dtype, copy=False)


def softmax_lastdim(x) -> np.ndarray:
    x = as_tensor(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x) -> np.ndarray:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    x = as_tensor(x)
    return (0.5 * x * (1.0 + erf(x * x.dtype.type(1.0 / math.sqrt(2.0))))).astype(x.dtype, copy=False)


def relu(x: Union[np.ndarray, AccTensor]):
    if isinstance(x, AccTensor):
        return AccTensor(np.maximum(x.data, 0))
    x = np.asarray(x)
    return np.maximum(x, x.dtype.type(0))
