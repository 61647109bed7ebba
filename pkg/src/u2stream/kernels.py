"""Dense numeric kernels for the streaming recognizer.

Pure functions over numpy arrays: matrix product, layer normalization,
GELU, log-softmax, boolean-masked multi-head attention, and a per-row
symmetric int8 quantized linear path. Kernels preserve the floating
dtype of their inputs; the engine itself runs float32 end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Finite stand-in for -inf on masked attention scores. Subtracting the row
# max from a true -inf would produce nan; a large negative sentinel
# underflows to exactly zero weight instead.
MASKED_SCORE = -1.0e9


def matmul(a, b):
    """Matrix product (delegates to BLAS through numpy)."""
    return np.matmul(a, b)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize the last axis to zero mean, unit variance, then scale and shift."""
    x = np.asarray(x)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


_GELU_COEF = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Gaussian error linear unit (tanh approximation)."""
    x = np.asarray(x)
    return 0.5 * x * (1.0 + np.tanh(_GELU_COEF * (x + 0.044715 * x * x * x)))


def log_softmax(x, axis: int = -1):
    """Log-softmax along ``axis``, stabilized by max subtraction.

    Exponentials of the output sum to 1 along the axis; the result is
    invariant to adding a constant to the input.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("log_softmax: empty input")
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def masked_attention(query, key, value, mask, heads: int):
    """Multi-head scaled dot-product attention under a boolean visibility mask.

    Args:
        query: (..., L, d) array.
        key, value: (..., S, d) arrays; leading dims broadcast with query.
        mask: (L, S) or (..., L, S) booleans, True where a query row may
            attend. Every row must allow at least one position.
        heads: number of attention heads; must divide d.

    Scores at masked positions are pinned to a large negative sentinel
    before the softmax, so each row normalizes over its allowed set only
    and masked positions contribute exactly zero weight.
    """
    q = np.asarray(query)
    k = np.asarray(key)
    v = np.asarray(value)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ValueError("masked_attention: query/key/value must be at least 2-D")
    L, d = q.shape[-2:]
    S = k.shape[-2]
    if k.shape[-1] != d or v.shape[-2:] != k.shape[-2:]:
        raise ValueError(
            f"masked_attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}"
        )
    if heads < 1 or d % heads != 0:
        raise ValueError(f"masked_attention: width {d} not divisible by {heads} heads")
    m = np.asarray(mask, dtype=bool)
    if m.shape[-2:] != (L, S):
        raise ValueError(f"masked_attention: mask shape {m.shape} wants (..., {L}, {S})")
    if not m.any(axis=-1).all():
        raise ValueError("masked_attention: mask has a fully masked row")

    batch = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2])
    qb = np.broadcast_to(q, batch + (L, d)).reshape(-1, L, d)
    kb = np.broadcast_to(k, batch + (S, d)).reshape(-1, S, d)
    vb = np.broadcast_to(v, batch + (S, d)).reshape(-1, S, d)
    B = qb.shape[0]
    hd = d // heads

    qh = qb.reshape(B, L, heads, hd).transpose(0, 2, 1, 3)
    kh = kb.reshape(B, S, heads, hd).transpose(0, 2, 1, 3)
    vh = vb.reshape(B, S, heads, hd).transpose(0, 2, 1, 3)

    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    if m.ndim == 2:
        mb = m[None, None, :, :]
    else:
        mb = np.broadcast_to(m, batch + (L, S)).reshape(-1, L, S)[:, None, :, :]
    scores = np.where(mb, scores, scores.dtype.type(MASKED_SCORE))
    weights = np.exp(log_softmax(scores, axis=-1))
    out = (weights @ vh).transpose(0, 2, 1, 3).reshape(B, L, d)
    if batch:
        return out.reshape(batch + (L, d))
    return out[0]


@dataclass(frozen=True)
class QuantizedMatrix:
    """Per-output-row symmetric int8 weights with float32 row scales."""

    values: np.ndarray  # int8, (rows, cols)
    scales: np.ndarray  # float32, (rows,)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def quantize(weights) -> QuantizedMatrix:
    """Quantize a 2-D float matrix row-wise to int8 with one scale per row.

    scale = max(|row|) / 127; an all-zero row gets scale 1 and zero codes.
    Scale arithmetic runs in float64 so quantize(dequantize(q)) reproduces
    q bit for bit.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"quantize: expected 2-D matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError("quantize: non-finite weights")
    amax = np.abs(w).max(axis=1)
    scales = np.where(amax > 0.0, amax / 127.0, 1.0).astype(np.float32)
    codes = np.rint(w / scales.astype(np.float64)[:, None])
    codes = np.clip(codes, -127, 127).astype(np.int8)
    return QuantizedMatrix(codes, scales)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    """Exact float64 reconstruction: code * row scale."""
    return q.values.astype(np.float64) * q.scales.astype(np.float64)[:, None]


def quantized_linear(x, w: QuantizedMatrix, bias=None):
    """Compute x @ dequantized(w).T + bias with a float32 weight reconstruction.

    x is (..., cols); the result is (..., rows).
    """
    x = np.asarray(x)
    if x.shape[-1] != w.cols:
        raise ValueError(
            f"quantized_linear: input width {x.shape[-1]} != weight cols {w.cols}"
        )
    deq = w.values.astype(np.float32) * w.scales[:, None]
    y = x @ deq.T
    if bias is not None:
        y = y + bias
    return y
