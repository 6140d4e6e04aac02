"""Batch enhancement and the equivalent hop-by-hop streaming engine.

The streaming engine buffers one hop of each input, forms a 320-sample
window once two hops are available, runs the network on that single frame
with carried layer histories, and emits one hop of overlap-added output.
After ``N`` pushes and a flush it has emitted exactly ``N * hop`` samples,
which equal :func:`enhance` on the same audio.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tvase import stft as S
from tvase.model import model_forward
from tvase.weights import ModelWeights


class StreamError(RuntimeError):
    pass


def enhance(mic, far, weights: ModelWeights, dtype=np.float32, cfg: S.StftConfig = S.DEFAULT) -> np.ndarray:
    """Enhance a whole clip; output has the input's length.

    Trailing samples that no complete analysis window covers come out as 0.
    """
    mic = np.asarray(mic, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if mic.shape != far.shape:
        raise ValueError(f"mic and far-end lengths differ: {mic.shape} vs {far.shape}")
    est = model_forward(S.stft(mic, cfg).astype(dtype), S.stft(far, cfg).astype(dtype), weights, dtype)
    out = S.istft(est, cfg=cfg)
    return np.concatenate([out, np.zeros(len(mic) - len(out))])


@dataclass
class StreamState:
    weights: ModelWeights
    dtype: np.dtype = np.dtype(np.float32)
    cfg: S.StftConfig = S.DEFAULT
    layers: dict = field(default_factory=dict)
    mic_prev: np.ndarray | None = None
    far_prev: np.ndarray | None = None
    ola_tail: np.ndarray | None = None
    hops_in: int = 0
    frames_processed: int = 0
    flushed: bool = False
    poisoned: bool = False

    def nbytes(self) -> int:
        """Memory held in buffers and caches (bounded, independent of stream length)."""
        total = 0
        for v in list(self.layers.values()) + [self.mic_prev, self.far_prev, self.ola_tail]:
            if v is not None:
                total += v.nbytes
        return total


def stream_create(weights: ModelWeights, dtype=np.float32, cfg: S.StftConfig = S.DEFAULT) -> StreamState:
    if cfg.win_len != 2 * cfg.hop:
        raise ValueError("the streaming engine expects 50% overlap")
    return StreamState(weights=weights, dtype=np.dtype(dtype), cfg=cfg)


def _check_usable(state: StreamState):
    if state.poisoned:
        raise StreamError("stream state is poisoned by an earlier error; create a new one")
    if state.flushed:
        raise StreamError("stream already flushed")


def stream_push(state: StreamState, mic_samples, far_samples) -> np.ndarray | None:
    """Feed one hop of mic and far-end audio; returns one hop of output after warm-up."""
    _check_usable(state)
    hop = state.cfg.hop
    mic = np.asarray(mic_samples, dtype=np.float64).reshape(-1)
    far = np.asarray(far_samples, dtype=np.float64).reshape(-1)
    if len(mic) != hop or len(far) != hop:
        raise ValueError(f"expected {hop} samples per input, got {len(mic)} and {len(far)}")
    try:
        out = None
        if state.hops_in > 0:
            out = _process_frame(state, np.concatenate([state.mic_prev, mic]), np.concatenate([state.far_prev, far]))
        state.mic_prev, state.far_prev = mic, far
        state.hops_in += 1
        return out
    except Exception:
        state.poisoned = True
        raise


def _process_frame(state: StreamState, mic_win: np.ndarray, far_win: np.ndarray) -> np.ndarray:
    cfg, hop = state.cfg, state.cfg.hop
    spec_mic = S.frame_spectrum(mic_win[None], cfg).astype(state.dtype)
    spec_far = S.frame_spectrum(far_win[None], cfg).astype(state.dtype)
    est = model_forward(spec_mic, spec_far, state.weights, state.dtype, state=state.layers)
    frame = S.frame_signals(est, cfg)[0]
    w2 = cfg.window**2
    if state.ola_tail is None:
        acc, norm = frame[:hop].copy(), w2[:hop]
    else:
        acc, norm = state.ola_tail + frame[:hop], w2[:hop] + w2[hop:]
    state.ola_tail = frame[hop:].copy()
    state.frames_processed += 1
    return S._safe_divide(acc, norm)


def stream_flush(state: StreamState) -> np.ndarray:
    """Drain the overlap-add tail (one hop); a second flush returns an empty array."""
    if state.poisoned:
        raise StreamError("stream state is poisoned by an earlier error; create a new one")
    if state.flushed or state.hops_in == 0:
        state.flushed = True
        return np.zeros(0)
    state.flushed = True
    hop = state.cfg.hop
    if state.ola_tail is None:
        return np.zeros(hop)
    return S._safe_divide(state.ola_tail, state.cfg.window[hop:] ** 2)


def enhance_streaming(mic, far, weights: ModelWeights, dtype=np.float32, cfg: S.StftConfig = S.DEFAULT) -> np.ndarray:
    """Drive a fresh stream over whole hops of a clip; pads a partial trailing hop with zeros."""
    mic = np.asarray(mic, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if mic.shape != far.shape:
        raise ValueError(f"mic and far-end lengths differ: {mic.shape} vs {far.shape}")
    state = stream_create(weights, dtype, cfg)
    hop = cfg.hop
    n_hops = len(mic) // hop
    pieces = []
    for k in range(n_hops):
        out = stream_push(state, mic[k * hop : (k + 1) * hop], far[k * hop : (k + 1) * hop])
        if out is not None:
            pieces.append(out)
    pieces.append(stream_flush(state))
    pieces.append(np.zeros(len(mic) - n_hops * hop))
    return np.concatenate(pieces)
