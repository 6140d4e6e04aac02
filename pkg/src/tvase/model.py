"""Forward pass of the joint echo-cancellation / noise-suppression network.

Pipeline: two causal conv encoders (microphone, far-end) -> fusion conv ->
frequency folded into channels -> ``num_tvase`` blocks of
(TCM -> grouped windowed self-attention -> dynamic kernel generation) ->
gated decoder fed by microphone-encoder skips -> estimated near-end spectrum.

Every function accepts ``state``: ``None`` runs on a zero/empty past (batch
inference); a dict carries layer histories and attention caches between
calls so a sequence can be fed in chunks, down to a single frame, with the
same result as one batch call. Histories live under the layer name.
"""
from __future__ import annotations

import math

import numpy as np

from tvase import numerics as nx
from tvase.weights import ModelConfig, ModelWeights

ATTN_BLOCK = 256  # queries per block in long-sequence attention


def _get(state, key):
    return None if state is None else state.get(key)


def _block(state):
    # batch calls use fixed frame blocks (length-independent results); streaming does not
    return nx.FRAME_BLOCK if state is None else None


def _norm_act(x, w, name):
    # batch norm is folded into the layer's weight and bias (see _params)
    slopes = w.slopes[name]
    return _prelu(x, slopes[x.ndim - 2], slopes[2])


def _prelu(x, slope, unit):
    # with every slope in [0, 1] the max form equals the select form exactly and is cheaper
    y = slope * x
    if unit:
        return np.maximum(x, y, out=y)
    return np.where(x > 0, x, y)


def _conv2d(x, w, name, state, *, stride=(1, 1), pad=0, norm=True):
    kt = w[f"{name}.weight"].shape[2]
    hist = _get(state, name)
    y = nx.conv2d(x, w[f"{name}.weight"], w[f"{name}.bias"], stride, pad, history=hist, block=_block(state))
    if state is not None and kt > 1:
        state[name] = nx.tail_frames(hist, x, kt - 1)
    return _norm_act(y, w, name) if norm else y


def _deconv2d(x, w, name, state, *, stride, pad, norm=True):
    _, _, kt, kf = w[f"{name}.weight"].shape
    w2 = w.fused.get(name)
    if w2 is None:
        w2 = w.fused[name] = nx.transposed_matrix(w[f"{name}.weight"])
    if x.shape[0] * kt != w2.shape[1]:
        raise nx.ShapeError("transposed_conv2d", "channels", w2.shape[1] // kt, x.shape[0])
    hist = _get(state, name)
    f_out = nx.transposed_output_size(x.shape[2], stride[1], pad, kf)
    y = nx.transposed_conv2d_gemm(x, w2, kt, kf, w[f"{name}.bias"], stride[1], pad, f_out, hist, _block(state))
    if state is not None and kt > 1:
        state[name] = nx.tail_frames(hist, x, kt - 1)
    return _norm_act(y, w, name) if norm else y


def _conv1d(x, w, name, state, *, groups=1, norm=True):
    k = w[f"{name}.weight"].shape[2]
    hist = _get(state, name)
    y = nx.conv1d(x, w[f"{name}.weight"], w[f"{name}.bias"], groups=groups, history=hist, block=_block(state))
    if state is not None and k > 1:
        state[name] = nx.tail_frames(hist, x, k - 1)
    return _norm_act(y, w, name) if norm else y


class _View(dict):
    """Layer tensors of one dtype with inference batch norm folded into conv weight/bias."""

    slopes: dict
    fused: dict


def _params(weights: ModelWeights, dtype):
    key = ("view", np.dtype(dtype))
    view = weights._cast_cache.get(key)
    if view is None:
        raw = weights.cast(dtype)
        view = _View(raw)
        view.slopes, view.fused = {}, {}
        for layer, (scale, shift, slope) in weights.folded_norms(dtype).items():
            wt = raw[f"{layer}.weight"]
            axis = 1 if layer.startswith("dec.deconv") else 0
            shape = [1] * wt.ndim
            shape[axis] = -1
            view[f"{layer}.weight"] = wt * scale.reshape(shape)
            view[f"{layer}.bias"] = raw[f"{layer}.bias"] * scale + shift
            view.slopes[layer] = (slope[:, None], slope[:, None, None], bool(np.all((slope >= 0) & (slope <= 1))))
        weights._cast_cache[key] = view
    return weights.config, view


# ---------------------------------------------------------------------------
# encoder / fusion


def encoder_forward(spec, weights: ModelWeights, which: str, dtype=np.float32, state=None):
    """Four causal conv layers; returns every layer's output (the decoder skips)."""
    if which not in ("mic", "far"):
        raise ValueError("which must be 'mic' or 'far'")
    cfg, w = _params(weights, dtype)
    x = np.asarray(spec, dtype=dtype)
    if x.ndim != 3 or x.shape[0] != 2 or x.shape[2] != cfg.n_bins:
        raise nx.ShapeError("encoder_forward", "input (2, T, F)", (2, "T", cfg.n_bins), x.shape)
    feats = []
    for i, s in enumerate(cfg.enc_freq_strides):
        x = _conv2d(x, w, f"enc_{which}.{i}", state, stride=(1, s), pad=cfg.enc_freq_pads[i])
        feats.append(x)
    return feats


def merge_freq(x: np.ndarray) -> np.ndarray:
    """``(C, T, F)`` -> ``(F*C, T)``; channel ``f*C + c`` holds frequency ``f`` of channel ``c``."""
    c, t, f = x.shape
    return np.ascontiguousarray(x.transpose(2, 0, 1)).reshape(f * c, t)


def unmerge_freq(x: np.ndarray, n_freq: int) -> np.ndarray:
    fc, t = x.shape
    return np.ascontiguousarray(x.reshape(n_freq, fc // n_freq, t).transpose(1, 2, 0))


def fuse(enc_mic, enc_far, weights: ModelWeights, dtype=np.float32, state=None):
    cfg, w = _params(weights, dtype)
    if enc_mic.shape != enc_far.shape:
        raise nx.ShapeError("fuse", "encoder outputs", enc_mic.shape, enc_far.shape)
    x = np.concatenate([enc_mic, enc_far], axis=0)
    y = _conv2d(x, w, "fuse", state, pad=cfg.fuse_pad)
    return merge_freq(y)


# ---------------------------------------------------------------------------
# TVASE block


def tcm_forward(x, weights: ModelWeights, block: int, dtype=np.float32, state=None):
    cfg, w = _params(weights, dtype)
    p = f"tvase.{block}.tcm"
    h = _conv1d(x, w, f"{p}.pw1", state)
    h = _conv1d(h, w, f"{p}.dw", state, groups=cfg.tcm_channels[0])
    h = _conv1d(h, w, f"{p}.pw2", state)
    return x + h


def _split_heads(y: np.ndarray, groups: int) -> np.ndarray:
    ga, t = y.shape
    return y.reshape(groups, ga // groups, t).transpose(0, 2, 1)  # (G, T, A)


def windowed_attention(q, k, v, window: int, scale: float, query_offset: int = 0, block: int | None = None):
    """Per-group causal windowed attention.

    ``q`` is ``(G, Tq, A)``; ``k``/``v`` are ``(G, Tk, A)``. Query ``i`` sits at
    key time ``query_offset + i``. Returns ``(G, Tq, A)``. With ``block`` the
    queries are processed in zero-padded blocks of that size whose matrix
    shapes depend only on the block position, never on ``Tq``.
    """
    # identical memory layout for any length: numpy's stacked matmul picks its
    # code path from strides
    g, n_q, _ = q.shape
    if block is None and n_q == 1 and query_offset + 1 == k.shape[1] and k.shape[1] <= window:
        # single streaming query that sees every cached key
        scores = q @ k.transpose(0, 2, 1) * scale
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        return (e / e.sum(axis=-1, keepdims=True)) @ v
    step = block or ATTN_BLOCK
    if block:
        q, k, v = (np.ascontiguousarray(a) for a in (q, k, v))
        n_pad = -(-n_q // block) * block
        q = np.concatenate([q, np.zeros((g, n_pad - n_q, q.shape[2]), q.dtype)], axis=1)
        extra = query_offset + n_pad - k.shape[1]
        if extra > 0:
            k = np.concatenate([k, np.zeros((g, extra, k.shape[2]), k.dtype)], axis=1)
            v = np.concatenate([v, np.zeros((g, extra, v.shape[2]), v.dtype)], axis=1)
    total = q.shape[1]
    out = np.empty((g, total, v.shape[2]), dtype=np.result_type(q, v))
    for s in range(0, total, step):
        e = min(total, s + step)
        k0 = max(0, query_offset + s - window + 1)
        k1 = query_offset + e
        scores = q[:, s:e] @ k[:, k0:k1].transpose(0, 2, 1) * scale
        probs = nx.masked_softmax(scores, window, query_start=query_offset + s - k0)
        out[:, s:e] = probs @ v[:, k0:k1]
    return out[:, :n_q]


def _qkv(x, w, p, g, state):
    """Q, K and V projections (conv + BN + PReLU each) as one grouped GEMM, ``(G, T, A)`` each."""
    fused = w.fused.get(p)
    if fused is None:
        ws = [w[f"{p}.{n}.weight"] for n in "qkv"]
        a, i_g = ws[0].shape[0] // g, ws[0].shape[1]
        weight = np.stack([m.reshape(g, a, i_g) for m in ws], axis=1).reshape(g, 3 * a, i_g)
        bias = np.stack([w[f"{p}.{n}.bias"].reshape(g, a) for n in "qkv"], axis=1)
        slope = np.stack([w.slopes[f"{p}.{n}"][0].reshape(g, a) for n in "qkv"], axis=1)
        unit = all(w.slopes[f"{p}.{n}"][2] for n in "qkv")
        fused = w.fused[p] = (weight, bias[..., None], slope[..., None], unit)
    weight, bias, slope, unit = fused
    n_t = x.shape[1]
    y = nx.gemm_frames(weight, x.reshape(g, -1, n_t, 1), _block(state)).reshape(g, 3, -1, n_t) + bias
    y = _prelu(y, slope, unit)
    return tuple(y[:, i].transpose(0, 2, 1) for i in range(3))


class _KVCache:
    """Projected keys/values of the last ``keep`` frames in a buffer that shifts only when full."""

    def __init__(self, keep: int):
        self.keep = keep
        self.k = self.v = None
        self.start = self.stop = 0

    @property
    def length(self) -> int:
        return self.stop - self.start

    @property
    def nbytes(self) -> int:
        return 0 if self.k is None else self.k.nbytes + self.v.nbytes

    def extend(self, k, v):
        """Append new frames; returns views of ``[cached; new]`` keys and values."""
        n = k.shape[1]
        if self.k is None:
            shape = (k.shape[0], 2 * self.keep + max(n, 1), k.shape[2])
            self.k, self.v = np.zeros(shape, k.dtype), np.zeros(shape, v.dtype)
        if self.stop + n > self.k.shape[1]:
            size = self.length
            grow = max(self.k.shape[1], 2 * self.keep + n)
            for name in ("k", "v"):
                buf = getattr(self, name)
                new = np.zeros((buf.shape[0], grow, buf.shape[2]), buf.dtype)
                new[:, :size] = buf[:, self.start : self.stop]
                setattr(self, name, new)
            self.start, self.stop = 0, size
        self.k[:, self.stop : self.stop + n] = k
        self.v[:, self.stop : self.stop + n] = v
        self.stop += n
        ks, vs = self.k[:, self.start : self.stop], self.v[:, self.start : self.stop]
        self.start = max(self.start, self.stop - self.keep)
        return ks, vs


def attention_forward(x, weights: ModelWeights, block: int, dtype=np.float32, state=None):
    """Grouped scaled dot-product self-attention with a causal look-back window.

    With ``state``, projected keys/values of the last ``window - 1`` frames are
    cached, which is exact because projections act per frame.
    """
    cfg, w = _params(weights, dtype)
    p = f"tvase.{block}.attn"
    g = cfg.attn_groups
    q, k, v = _qkv(x, w, p, g, state)
    offset = 0
    if state is not None:
        cache = state.get(f"{p}.cache")
        if cache is None:
            cache = state[f"{p}.cache"] = _KVCache(cfg.window - 1)
        offset = cache.length
        k, v = cache.extend(k, v)
    scale = 1.0 / math.sqrt(cfg.group_width)
    att = windowed_attention(q, k, v, cfg.window, scale, offset, block=_block(state))
    g_, t, a = att.shape
    merged = att.transpose(0, 2, 1).reshape(g_ * a, t)
    return _conv1d(merged, w, f"{p}.out", state)


def dkg_generate_nonseparable(x, weights: ModelWeights, block: int, dtype=np.float32, state=None):
    """Per-frequency-group pointwise conv emitting ``C*M`` values, read as ``C x M`` kernels."""
    cfg, w = _params(weights, dtype)
    f_groups, m = cfg.latent_freqs, cfg.dkg_kernel
    y = _conv1d(x, w, f"tvase.{block}.dkg.gen", state, groups=f_groups, norm=False)
    t = y.shape[1]
    return y.reshape(cfg.latent, m, t).transpose(0, 2, 1)


def dkg_separable_factors(x, weights: ModelWeights, block: int, dtype=np.float32, state=None):
    """Channel-shared filter ``K0`` ``(T, M)`` and channel weights ``Ks`` ``(C, T)``."""
    cfg, w = _params(weights, dtype)
    p = f"tvase.{block}.dkg"
    h = x
    n = len(cfg.sep_k0_channels)
    for i in range(n):
        h = _conv1d(h, w, f"{p}.k0.{i}", state)
    k0 = _conv1d(h, w, f"{p}.k0.{n}", state, norm=False).T
    ks = _conv1d(x, w, f"{p}.ks", state, norm=False)
    return k0, ks


def separable_kernel(k0: np.ndarray, ks: np.ndarray) -> np.ndarray:
    """``K[c, t, m] = Ks[c, t] * K0[t, m]``."""
    return ks[:, :, None] * k0[None, :, :]


def dkg_generate_separable(x, weights: ModelWeights, block: int, dtype=np.float32, state=None):
    return separable_kernel(*dkg_separable_factors(x, weights, block, dtype, state))


def dkg_apply(x: np.ndarray, kernel: np.ndarray, history: np.ndarray | None = None) -> np.ndarray:
    """Per-channel, per-frame FIR: ``out[c, t] = sum_m K[c, t, m] * x[c, t - (M - 1) + m]``.

    Frames before the start are zero unless ``history`` (the ``M - 1``
    previous frames) is given.
    """
    if kernel.ndim != 3 or kernel.shape[:2] != x.shape:
        raise nx.ShapeError("dkg_apply", "kernel (C, T, M)", x.shape + ("M",), kernel.shape)
    m = kernel.shape[2]
    t = x.shape[1]
    xp = nx._past(history, x, m - 1)
    if t == 1:
        return np.einsum("cm,cm->c", kernel[:, 0], xp)[:, None]
    out = kernel[:, :, 0] * xp[:, 0:t]
    for j in range(1, m):
        out = out + kernel[:, :, j] * xp[:, j : j + t]
    return out


def tvase_forward(x, weights: ModelWeights, block: int, dtype=np.float32, state=None):
    cfg = weights.config
    h = tcm_forward(x, weights, block, dtype, state)
    h = attention_forward(h, weights, block, dtype, state)
    if cfg.dkg == "none":
        return h
    if cfg.dkg == "separable":
        kernel = dkg_generate_separable(h, weights, block, dtype, state)
    else:
        kernel = dkg_generate_nonseparable(h, weights, block, dtype, state)
    key = f"tvase.{block}.dkg.hist"
    hist = _get(state, key)
    out = dkg_apply(h, kernel, hist)
    if state is not None:
        state[key] = nx.tail_frames(hist, h, cfg.dkg_kernel - 1)
    return out


# ---------------------------------------------------------------------------
# decoder


def gated_block(skip, dec, weights: ModelWeights, stage: int, dtype=np.float32, state=None):
    """``dec + sigmoid(Conv1x1([skip; dec])) * skip``."""
    _, w = _params(weights, dtype)
    if skip.shape != dec.shape:
        raise nx.ShapeError("gated_block", "skip vs decoder feature", dec.shape, skip.shape)
    gate = nx.sigmoid(_conv2d(np.concatenate([skip, dec], axis=0), w, f"dec.gate.{stage}", state, norm=False))
    return dec + gate * skip


def decoder_forward(latent, mic_skips, weights: ModelWeights, dtype=np.float32, state=None, trace=None):
    cfg, w = _params(weights, dtype)
    n = len(cfg.enc_channels)
    if len(mic_skips) != n:
        raise nx.ShapeError("decoder_forward", "skip count", n, len(mic_skips))
    h = unmerge_freq(latent, cfg.latent_freqs)
    for k in range(n):
        h = gated_block(mic_skips[n - 1 - k], h, weights, k, dtype, state)
        h = _deconv2d(
            h, w, f"dec.deconv.{k}", state, stride=(1, cfg.dec_freq_strides[k]), pad=cfg.dec_freq_pads[k]
        )
        if trace is not None:
            trace.append((f"dec.deconv.{k}", h.shape))
    out = _conv2d(h, w, "dec.final", state, pad=cfg.final_pad, norm=False)
    if trace is not None:
        trace.append(("dec.final", out.shape))
    return out


# ---------------------------------------------------------------------------


def model_forward(mic, far, weights: ModelWeights, dtype=np.float32, state=None, trace=None):
    """Estimate the near-end spectrum ``(2, T, F)`` from mic and far-end spectra.

    ``trace``, if a list, receives ``(stage, shape)`` for every intermediate.
    """
    mic = np.asarray(mic)
    far = np.asarray(far)
    if mic.shape != far.shape:
        raise nx.ShapeError("model_forward", "frames (mic vs far-end)", mic.shape, far.shape)
    enc_mic = encoder_forward(mic, weights, "mic", dtype, state)
    enc_far = encoder_forward(far, weights, "far", dtype, state)
    h = fuse(enc_mic[-1], enc_far[-1], weights, dtype, state)
    if trace is not None:
        trace.append(("input", mic.shape))
        trace += [(f"enc_mic.{i}", f.shape) for i, f in enumerate(enc_mic)]
        trace += [(f"enc_far.{i}", f.shape) for i, f in enumerate(enc_far)]
        trace.append(("fuse", h.shape))
    for b in range(weights.config.num_tvase):
        h = tvase_forward(h, weights, b, dtype, state)
        if trace is not None:
            trace.append((f"tvase.{b}", h.shape))
    return decoder_forward(h, enc_mic, weights, dtype, state, trace)
