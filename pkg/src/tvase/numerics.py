"""Dense-array primitives shared by the network, streaming engine and oracles.

Feature maps are numpy arrays laid out channel-major: ``(C, T, F)`` for 2-D
features and ``(C, T)`` for 1-D features, with ``T`` the frame axis. Every
time-axis operation here is causal: frame ``t`` of an output reads input frames
``<= t`` only. Layers with temporal support > 1 accept an optional ``history``
holding the previous input frames; ``None`` means an all-zero past, which is
what batch inference uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
FRAME_BLOCK = 32
PRELU_INIT = 0.25


class ShapeError(ValueError):
    """Raised when array shapes disagree; the message names the offending axis."""

    def __init__(self, op: str, axis: str, expected, got):
        super().__init__(f"{op}: {axis} mismatch (expected {expected}, got {got})")
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got


def _check(op: str, axis: str, expected, got) -> None:
    if expected != got:
        raise ShapeError(op, axis, expected, got)


def _past(history: np.ndarray | None, x: np.ndarray, n: int) -> np.ndarray:
    """Prepend ``n`` past frames (axis 1) to ``x``: ``history`` or zeros."""
    if n == 0:
        return x
    if history is None:
        pad = np.zeros((x.shape[0], n) + x.shape[2:], dtype=x.dtype)
    else:
        _check("history", "frames", n, history.shape[1])
        _check("history", "channels", x.shape[0], history.shape[0])
        pad = history.astype(x.dtype, copy=False)
    return np.concatenate([pad, x], axis=1)


def _padded(history: np.ndarray | None, x: np.ndarray, n: int, freq_pad: int) -> np.ndarray:
    """``[history; x]`` along frames with ``freq_pad`` zero bins on both ends of axis 2, contiguous."""
    c, t, f = x.shape
    out = np.zeros((c, n + t, f + 2 * freq_pad), dtype=x.dtype)
    if n and history is not None:
        _check("history", "frames", n, history.shape[1])
        _check("history", "channels", c, history.shape[0])
        out[:, :n, freq_pad : freq_pad + f] = history
    out[:, n:, freq_pad : freq_pad + f] = x
    return out


def tail_frames(history: np.ndarray | None, x: np.ndarray, n: int) -> np.ndarray | None:
    """The last ``n`` frames of ``[history; x]``: the history for the next chunk."""
    if n == 0:
        return None
    t = x.shape[1]
    if t >= n:
        return x[:, t - n :].copy()
    return _past(history, x, n)[:, -n:].copy()


def gemm_frames(w: np.ndarray, x: np.ndarray, block: int | None = None) -> np.ndarray:
    """``(..., O, K) x (..., K, T, R) -> (..., O, T, R)`` computed in fixed-width frame blocks.

    BLAS picks different micro-kernels (different summation orders) for
    different matrix widths, so a plain product makes frame ``t``'s result
    depend on the total frame count. With ``block`` set, the frame axis is
    zero-padded to whole blocks and every GEMM has the same shape, which makes
    each frame's output bit-identical for any sequence length.
    """
    *lead, k, t, r = x.shape
    o = w.shape[-2]
    if block is None:
        return (w @ x.reshape(*lead, k, t * r)).reshape(*lead, o, t, r)
    n = -(-t // block) * block
    if n != t:
        x = np.concatenate([x, np.zeros((*lead, k, n - t, r), dtype=x.dtype)], axis=-2)
    out = np.empty((*lead, o, n, r), dtype=np.result_type(w, x))
    for s in range(0, n, block):
        cols = np.ascontiguousarray(x[..., s : s + block, :]).reshape(*lead, k, block * r)
        out[..., s : s + block, :] = (w @ cols).reshape(*lead, o, block, r)
    return out[..., :t, :]


def conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride: tuple[int, int] = (1, 1),
    freq_pad: int = 0,
    history: np.ndarray | None = None,
    block: int | None = FRAME_BLOCK,
) -> np.ndarray:
    """Causal 2-D convolution.

    ``x`` is ``(C_in, T, F)`` and ``weight`` is ``(C_out, C_in, k_t, k_f)``.
    Time tap ``k_t - 1`` multiplies the current frame, tap 0 the oldest one.
    Frequency is zero-padded symmetrically by ``freq_pad`` and strided by
    ``stride[1]``; the time stride must be 1 so the output keeps ``T`` frames.
    """
    if x.ndim != 3:
        raise ShapeError("conv2d", "rank", 3, x.ndim)
    c_out, c_in, kt, kf = weight.shape
    _check("conv2d", "channels", c_in, x.shape[0])
    if stride[0] != 1:
        raise ShapeError("conv2d", "time stride", 1, stride[0])
    xp = _padded(history, x, kt - 1, freq_pad)
    if xp.shape[2] < kf:
        raise ShapeError("conv2d", "frequency", f">= {kf} after padding", xp.shape[2])
    n_t = x.shape[1]
    n_f = (xp.shape[2] - kf) // stride[1] + 1
    # strided view (C_in, kt, kf, T, F_out) copied into (C_in * kt * kf, T, F_out)
    sc, st, sf = xp.strides
    patches = np.ndarray(
        (c_in, kt, kf, n_t, n_f), xp.dtype, buffer=xp, strides=(sc, st, sf, st, sf * stride[1])
    )
    cols = patches.reshape(c_in * kt * kf, n_t, n_f)
    y = gemm_frames(weight.reshape(c_out, -1), cols, block)
    if bias is not None:
        y += bias[:, None, None]
    return y


def conv1d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    groups: int = 1,
    history: np.ndarray | None = None,
    block: int | None = FRAME_BLOCK,
) -> np.ndarray:
    """Causal 1-D convolution over frames; ``weight`` is ``(C_out, C_in/groups, k)``.

    ``groups == C_in == C_out`` gives the depthwise form, evaluated as an
    explicit tap sum (tap ``k - 1`` is the current frame).
    """
    if x.ndim != 2:
        raise ShapeError("conv1d", "rank", 2, x.ndim)
    c_out, c_in_g, k = weight.shape
    _check("conv1d", "channels", c_in_g * groups, x.shape[0])
    if c_out % groups:
        raise ShapeError("conv1d", "output channels", f"multiple of {groups}", c_out)
    n_t = x.shape[1]
    if k == 1 and block is None:
        # pointwise, unblocked (the streaming path): one matmul per group
        if groups == 1:
            y = weight.reshape(c_out, c_in_g) @ x
        else:
            w = weight.reshape(groups, c_out // groups, c_in_g)
            y = (w @ x.reshape(groups, c_in_g, n_t)).reshape(c_out, n_t)
    elif groups == c_out == x.shape[0] and c_in_g == 1:
        xp = _past(history, x, k - 1)
        y = weight[:, 0, 0:1] * xp[:, 0:n_t]
        for j in range(1, k):
            y = y + weight[:, 0, j : j + 1] * xp[:, j : j + n_t]
    else:
        if k == 1:
            cols = x.reshape(groups, c_in_g, n_t, 1)
        else:
            # (C_in, T, k) -> (G, C_in/G * k, T, 1)
            patches = sliding_window_view(_past(history, x, k - 1), k, axis=1)
            cols = patches.reshape(groups, c_in_g, n_t, k).transpose(0, 1, 3, 2)
            cols = cols.reshape(groups, c_in_g * k, n_t, 1)
        w = weight.reshape(groups, c_out // groups, c_in_g * k)
        y = gemm_frames(w, cols, block).reshape(c_out, n_t)
    if bias is not None:
        y = y + bias[:, None]
    return y


def transposed_output_size(n_in: int, stride: int, pad: int, kernel: int) -> int:
    return (n_in - 1) * stride - 2 * pad + kernel


def transposed_conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride: tuple[int, int] = (1, 1),
    freq_pad: int = 0,
    history: np.ndarray | None = None,
    block: int | None = FRAME_BLOCK,
) -> np.ndarray:
    """Causal transposed 2-D convolution; ``weight`` is ``(C_in, C_out, k_t, k_f)``.

    The full time output has ``T + k_t - 1`` frames; the trailing ``k_t - 1``
    depend on future input and are dropped, so output frame ``t`` equals
    ``sum_j W[:, :, j] x[t - j]``. Frequency size is
    ``(F - 1) * stride - 2 * freq_pad + k_f``.
    """
    if x.ndim != 3:
        raise ShapeError("transposed_conv2d", "rank", 3, x.ndim)
    c_in, c_out, kt, kf = weight.shape
    _check("transposed_conv2d", "channels", c_in, x.shape[0])
    if stride[0] != 1:
        raise ShapeError("transposed_conv2d", "time stride", 1, stride[0])
    n_f = x.shape[2]
    f_out = transposed_output_size(n_f, stride[1], freq_pad, kf)
    if f_out < 1 or freq_pad < 0:
        raise ShapeError("transposed_conv2d", "frequency output size", "positive", f_out)
    return transposed_conv2d_gemm(x, transposed_matrix(weight), kt, kf, bias, stride[1], freq_pad, f_out, history, block)


def transposed_matrix(weight: np.ndarray) -> np.ndarray:
    """``(C_in, C_out, k_t, k_f)`` -> GEMM form: rows ``(m, c_out)``, columns ``(j, c_in)``."""
    c_in, c_out, kt, kf = weight.shape
    return np.ascontiguousarray(weight.transpose(3, 1, 2, 0).reshape(kf * c_out, kt * c_in))


def transposed_conv2d_gemm(x, w2, kt, kf, bias, stride, freq_pad, f_out, history=None, block=FRAME_BLOCK):
    """:func:`transposed_conv2d` with the weight already in :func:`transposed_matrix` form."""
    c_in, n_t, n_f = x.shape
    c_out = w2.shape[0] // kf
    xp = _past(history, x, kt - 1)
    # x[t - j] stacked along channels for tap j
    cols = np.concatenate([xp[:, kt - 1 - j : kt - 1 - j + n_t] for j in range(kt)], axis=0)
    taps = gemm_frames(w2, cols, block).reshape(kf, c_out, n_t, n_f)
    full = np.zeros((c_out, n_t, (n_f - 1) * stride + kf), dtype=taps.dtype)
    span = (n_f - 1) * stride + 1
    for m in range(kf):
        full[:, :, m : m + span : stride] += taps[m]
    y = full[:, :, freq_pad : freq_pad + f_out]
    if bias is not None:
        y = y + bias[:, None, None]
    return y


def batchnorm_infer(x, gamma, beta, mean, var, eps: float = BN_EPS):
    """Inference-mode batch norm with per-channel statistics on axis 0."""
    c = x.shape[0]
    for name, p in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        _check("batchnorm_infer", f"{name} length", c, p.shape[0])
    extra = (None,) * (x.ndim - 1)
    scale = gamma / np.sqrt(var + eps)
    return (x - mean[(slice(None),) + extra]) * scale[(slice(None),) + extra] + beta[
        (slice(None),) + extra
    ]


def prelu(x: np.ndarray, slope) -> np.ndarray:
    """Parametric ReLU with one slope per channel (axis 0), or a scalar slope."""
    slope = np.asarray(slope, dtype=x.dtype)
    if slope.ndim:
        _check("prelu", "slope length", x.shape[0], slope.shape[0])
        slope = slope.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.where(x > 0, x, slope * x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x|
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(x))


def window_mask(n_query: int, n_key: int, window: int, query_start: int = 0) -> np.ndarray:
    """Boolean mask: query ``i`` (time ``query_start + i``) may see key ``j`` (time ``j``)
    iff ``0 <= (query_start + i) - j <= window - 1``."""
    lag = (query_start + np.arange(n_query))[:, None] - np.arange(n_key)[None, :]
    return (lag >= 0) & (lag <= window - 1)


def masked_softmax(scores: np.ndarray, window: int, query_start: int = 0) -> np.ndarray:
    """Row softmax restricted to the causal look-back window; masked entries are exactly 0.

    ``scores`` is ``(..., n_query, n_key)``. Every query must see at least one key.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    nq, nk = scores.shape[-2:]
    allowed = window_mask(nq, nk, window, query_start)
    if not allowed.any(axis=1).all():
        raise ValueError("masked_softmax: a query row has no visible key")
    s = np.where(allowed, scores, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)  # exp(-inf) == 0 exactly
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Rng:
    """Counter-based generator family: one independent Philox stream per id.

    Stream ``i`` depends only on ``(seed, i)``, never on how many draws other
    streams made, so layer initialisation is independent of construction order.
    """

    seed: int

    def stream(self, stream_id: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(stream_id,))
        return np.random.Generator(np.random.Philox(ss))


def xavier_bound(fan_in: int, fan_out: int) -> float:
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fan_in and fan_out must be positive")
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_uniform(shape, fan_in: int, fan_out: int, gen: np.random.Generator) -> np.ndarray:
    a = xavier_bound(fan_in, fan_out)
    return gen.uniform(-a, a, size=shape).astype(np.float32)


def conv_fans(weight_shape, transposed: bool = False) -> tuple[int, int]:
    """Fan-in/fan-out as (channels of axis 1 or 0) × receptive field."""
    receptive = int(np.prod(weight_shape[2:])) if len(weight_shape) > 2 else 1
    if transposed:
        return weight_shape[1] * receptive, weight_shape[0] * receptive
    return weight_shape[1] * receptive, weight_shape[0] * receptive
