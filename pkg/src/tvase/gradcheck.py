"""Analytic gradients of dynamic-kernel application and separable kernel construction,
checked against central finite differences in float64."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from tvase import numerics as nx
from tvase.model import dkg_apply, separable_kernel

FD_STEP = 1e-6
TOLERANCE = 1e-4
DEFAULT_PROBES = 1000


def _f64(*arrays):
    out = []
    for a in arrays:
        a = np.asarray(a)
        if a.dtype != np.float64:
            raise TypeError(f"gradient checks run in float64, got {a.dtype}")
        out.append(a)
    return out


def dkg_apply_grads(x, kernel, upstream):
    """Gradients of ``L = sum(upstream * dkg_apply(x, kernel))``: ``(dL/dx, dL/dkernel)``.

    The op is bilinear: ``dF(c,t)/dK(c,t,m) = x(c, t-M+1+m)`` and ``x(c,t')``
    collects ``K(c,t,t'-t+M-1)`` from every output frame that reads it.
    """
    x, kernel, upstream = _f64(x, kernel, upstream)
    c, t = x.shape
    if kernel.ndim != 3 or kernel.shape[:2] != (c, t):
        raise nx.ShapeError("dkg_apply_grads", "kernel (C, T, M)", (c, t, "M"), kernel.shape)
    if upstream.shape != (c, t):
        raise nx.ShapeError("dkg_apply_grads", "upstream (C, T)", (c, t), upstream.shape)
    m = kernel.shape[2]
    xp = nx._past(None, x, m - 1)
    d_kernel = np.empty_like(kernel)
    d_xp = np.zeros_like(xp)
    for j in range(m):
        d_kernel[:, :, j] = upstream * xp[:, j : j + t]
        d_xp[:, j : j + t] += upstream * kernel[:, :, j]
    return d_xp[:, m - 1 :], d_kernel


def separable_kernel_grads(ks, k0, upstream_kernel):
    """Gradients through ``K(c,t,m) = Ks(c,t) K0(t,m)``: ``(dL/dKs, dL/dK0)``."""
    ks, k0, up = _f64(ks, k0, upstream_kernel)
    if ks.ndim != 2 or k0.ndim != 2 or ks.shape[1] != k0.shape[0]:
        raise nx.ShapeError("separable_kernel_grads", "Ks (C, T) / K0 (T, M)", "matching T", (ks.shape, k0.shape))
    if up.shape != (ks.shape[0], ks.shape[1], k0.shape[1]):
        raise nx.ShapeError("separable_kernel_grads", "upstream (C, T, M)", ks.shape + k0.shape[1:], up.shape)
    return np.einsum("ctm,tm->ct", up, k0), np.einsum("ctm,ct->tm", up, ks)


@dataclass
class GradReport:
    op: str
    max_rel_error: float
    tolerance: float
    passed: bool
    probes: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "GradReport":
        return cls(**d)


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True)


def reports_from_json(text: str) -> list[GradReport]:
    return [GradReport.from_dict(d) for d in json.loads(text)]


def rel_error(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def central_difference(loss, arrays, which: int, flat_index: int, step: float = FD_STEP) -> float:
    arr = arrays[which]
    idx = np.unravel_index(flat_index, arr.shape)
    orig = arr[idx]
    arr[idx] = orig + step
    hi = loss(*arrays)
    arr[idx] = orig - step
    lo = loss(*arrays)
    arr[idx] = orig
    return (hi - lo) / (2.0 * step)


def _probe(name, loss, arrays, which, grad, order, probes, step, tol):
    picks = order[: min(probes, order.size)]
    fd = np.array([central_difference(loss, arrays, which, int(i), step) for i in picks])
    err = rel_error(grad.ravel()[picks], fd)
    worst = float(err.max()) if err.size else 0.0
    return GradReport(name, worst, tol, bool(worst <= tol), int(picks.size))


def run_gradcheck(seed: int = 0, probes: int = DEFAULT_PROBES, channels: int = 32, frames: int = 40,
                  taps: int = 10, step: float = FD_STEP, tol: float = TOLERANCE) -> list[GradReport]:
    """Compare analytic gradients with central differences at ``probes`` coordinates per tensor.

    Coordinates follow a fixed seed-determined permutation, so a larger
    ``probes`` checks a superset of a smaller one.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = nx.Rng(seed)
    g = rng.stream(0)

    def draw(*shape):
        # magnitudes in [0.5, 1.5]: no probe sits on a vanishing product-rule gradient
        return g.choice([-1.0, 1.0], size=shape) * g.uniform(0.5, 1.5, size=shape)

    x = draw(channels, frames)
    kernel = draw(channels, frames, taps)
    up = draw(channels, frames)
    ks = draw(channels, frames)
    k0 = draw(frames, taps)
    up_k = draw(channels, frames, taps)

    # exact summation: terms the perturbation leaves alone cancel between the two evaluations
    def loss_apply(x_, k_):
        return math.fsum((up * dkg_apply(x_, k_)).ravel())

    def loss_sep(ks_, k0_):
        return math.fsum((up_k * separable_kernel(k0_, ks_)).ravel())

    dx, dk = dkg_apply_grads(x, kernel, up)
    dks, dk0 = separable_kernel_grads(ks, k0, up_k)
    orders = [rng.stream(1 + i).permutation(a.size) for i, a in enumerate((x, kernel, ks, k0))]
    return [
        _probe("dkg_apply/x", loss_apply, [x, kernel], 0, dx, orders[0], probes, step, tol),
        _probe("dkg_apply/kernel", loss_apply, [x, kernel], 1, dk, orders[1], probes, step, tol),
        _probe("separable_kernel/Ks", loss_sep, [ks, k0], 0, dks, orders[2], probes, step, tol),
        _probe("separable_kernel/K0", loss_sep, [ks, k0], 1, dk0, orders[3], probes, step, tol),
    ]
