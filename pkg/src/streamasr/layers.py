"""Neural layer primitives with exact analytic gradients.

Everything is plain float64 numpy. Each operation comes as a
forward function returning ``(output, cache)`` and a matching backward
function consuming ``(grad_output, cache)``; caches are never shared
between concurrent backward passes. Parameters are immutable during a
forward/backward pair.

Conventions fixed here for reproducibility:

* GRU gates are stacked ``[update z | reset r | candidate h]`` along the
  first axis of the 3H-sized affine, with
  ``h' = z * h_prev + (1 - z) * tanh(a_h + r * (U_h h_prev))``.
* 2-D convolution kernels and strides are ordered (frequency, time);
  frequency padding is symmetric "same", time padding is left-only so no
  future frames are required.
* The chunked bidirectional layer shares one input affine between both
  directions; the backward direction owns only recurrent weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# 2-D convolution
# ---------------------------------------------------------------------------


@dataclass
class Conv2dSpec:
    """Filter bank geometry: kernel and stride are (frequency, time)."""

    filters: int
    kernel: tuple[int, int]
    in_channels: int
    stride: tuple[int, int]

    def __post_init__(self):
        if min(self.filters, self.in_channels, *self.kernel, *self.stride) < 1:
            raise ValueError("conv spec entries must be positive")


def conv2d_init(spec: Conv2dSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, (spec.filters, spec.in_channels, *spec.kernel))
    return w, np.zeros(spec.filters)


def _conv_geometry(T: int, F: int, spec: Conv2dSpec):
    kf, kt = spec.kernel
    sf, st = spec.stride
    out_t = -(-T // st)  # ceil
    out_f = -(-F // sf)
    pad_t = kt - 1  # causal: left only
    pad_f_total = max((out_f - 1) * sf + kf - F, 0)
    return kf, kt, sf, st, out_t, out_f, pad_t, pad_f_total // 2, pad_f_total - pad_f_total // 2


def conv2d_forward(x: np.ndarray, spec: Conv2dSpec, w: np.ndarray, b: np.ndarray):
    """Strided cross-correlation of a (T, F, C) input.

    Output time length is ceil(T / stride_time); output frame j only sees
    input frames <= j * stride_time thanks to the left-only time padding.
    """
    T, F, C = x.shape
    if C != spec.in_channels or w.shape != (spec.filters, C, *spec.kernel):
        raise ValueError("shape error")
    kf, kt, sf, st, out_t, out_f, pad_t, pf0, pf1 = _conv_geometry(T, F, spec)
    xp = np.zeros((T + pad_t, F + pf0 + pf1, C))
    xp[pad_t:, pf0 : pf0 + F] = x
    # windows laid out (out_t, out_f, kt, kf, C) so flattening matches the
    # (dt, df, c) ordering of the flattened kernel below
    view = np.lib.stride_tricks.sliding_window_view(xp, (kt, kf), axis=(0, 1))
    cols = view[: out_t * st : st, : out_f * sf : sf].transpose(0, 1, 3, 4, 2)
    cols = np.ascontiguousarray(cols).reshape(out_t, out_f, kt * kf * C)
    wmat = w.transpose(3, 2, 1, 0).reshape(kt * kf * C, spec.filters)
    y = cols.reshape(out_t * out_f, -1) @ wmat + b
    y = y.reshape(out_t, out_f, spec.filters)
    cache = (cols, wmat, x.shape, spec)
    return y, cache


def conv2d_backward(gy: np.ndarray, cache):
    cols, wmat, x_shape, spec = cache
    T, F, C = x_shape
    kf, kt, sf, st, out_t, out_f, pad_t, pf0, pf1 = _conv_geometry(T, F, spec)
    g2 = gy.reshape(out_t * out_f, spec.filters)
    gb = g2.sum(axis=0)
    gwmat = cols.reshape(out_t * out_f, -1).T @ g2
    gw = gwmat.reshape(kt, kf, C, spec.filters).transpose(3, 2, 1, 0)
    gcols = (g2 @ wmat.T).reshape(out_t, out_f, -1)
    gxp = np.zeros((T + pad_t, F + pf0 + pf1, C))
    for dt in range(kt):
        for df in range(kf):
            gxp[dt : dt + out_t * st : st, df : df + out_f * sf : sf, :] += gcols[
                :, :, (dt * kf + df) * C : (dt * kf + df + 1) * C
            ]
    gx = gxp[pad_t:, pf0 : pf0 + F]
    return gx, gw, gb


# ---------------------------------------------------------------------------
# Sequence-wise batch normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5


@dataclass
class BatchNormStats:
    """Trained scale/shift plus running statistics for eval mode."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def initial(cls, n_features: int, momentum: float = 0.1) -> "BatchNormStats":
        return cls(
            gamma=np.ones(n_features),
            beta=np.zeros(n_features),
            running_mean=np.zeros(n_features),
            running_var=np.ones(n_features),
            momentum=momentum,
        )


def batchnorm_forward(x: np.ndarray, stats: BatchNormStats, mode: str):
    """Normalize rows of (N, F) per feature.

    ``mode="train"`` uses the batch statistics of `x` (all batch x time
    rows jointly) and folds them into the running estimates;
    ``mode="eval"`` applies the stored running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("insufficient samples")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        stats.running_mean = (1 - stats.momentum) * stats.running_mean + stats.momentum * mean
        stats.running_var = (1 - stats.momentum) * stats.running_var + stats.momentum * var
    else:
        mean, var = stats.running_mean, stats.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xn = (x - mean) * inv_std
    y = stats.gamma * xn + stats.beta
    return y, (xn, inv_std, stats.gamma, mode)


def batchnorm_backward(gy: np.ndarray, cache):
    xn, inv_std, gamma, mode = cache
    ggamma = np.sum(gy * xn, axis=0)
    gbeta = np.sum(gy, axis=0)
    gxn = gy * gamma
    if mode == "eval":
        return gxn * inv_std, ggamma, gbeta
    n = xn.shape[0]
    gx = inv_std * (gxn - gxn.mean(axis=0) - xn * np.mean(gxn * xn, axis=0))
    # the exact train-mode formula; the means make the extra 1/n terms explicit
    assert n >= 2
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


@dataclass
class GruParams:
    """Input affine `w` (3H x D), recurrent `u` (3H x H) and bias `b` (3H)."""

    w: np.ndarray
    u: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        h = self.u.shape[1]
        if self.u.shape != (3 * h, h) or self.w.shape[0] != 3 * h or self.b.shape != (3 * h,):
            raise ValueError("inconsistent GRU parameter shapes")

    @property
    def hidden(self) -> int:
        return self.u.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w.shape[1]

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator) -> "GruParams":
        bw = 1.0 / math.sqrt(input_dim)
        bu = 1.0 / math.sqrt(hidden)
        return cls(
            w=rng.uniform(-bw, bw, (3 * hidden, input_dim)),
            u=rng.uniform(-bu, bu, (3 * hidden, hidden)),
            b=np.zeros(3 * hidden),
        )


def gru_step(a: np.ndarray, h_prev: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One recurrence step from the pre-gate affine `a` (3H, includes bias).

    z = sigma(a_z + U_z h), r = sigma(a_r + U_r h),
    c = tanh(a_h + r * (U_h h)), h' = z * h + (1 - z) * c.
    """
    H = h_prev.size
    uh = u @ h_prev
    z = sigmoid(a[:H] + uh[:H])
    r = sigmoid(a[H : 2 * H] + uh[H : 2 * H])
    c = np.tanh(a[2 * H :] + r * uh[2 * H :])
    return z * h_prev + (1.0 - z) * c


def _recurrence(a: np.ndarray, u: np.ndarray, order, h0: np.ndarray):
    """Run the gated recurrence over rows of `a` in the given index order.

    Returns hidden states indexed by original position plus the step cache
    (in processing order) needed for backpropagation through time.
    """
    H = u.shape[1]
    T = a.shape[0]
    states = np.empty((T, H))
    steps = []
    h = h0
    for t in order:
        uh = u @ h
        z = sigmoid(a[t, :H] + uh[:H])
        r = sigmoid(a[t, H : 2 * H] + uh[H : 2 * H])
        q = uh[2 * H :]
        c = np.tanh(a[t, 2 * H :] + r * q)
        h_new = z * h + (1.0 - z) * c
        steps.append((t, h, z, r, q, c))
        states[t] = h_new
        h = h_new
    return states, steps, h


def _recurrence_backward(g_states: np.ndarray, steps, u: np.ndarray, g_h_final: np.ndarray | None = None):
    """Backprop through `_recurrence`; returns (grad affine, grad u, grad h0)."""
    H = u.shape[1]
    ga = np.zeros((g_states.shape[0], 3 * H))
    gu = np.zeros_like(u)
    gh = np.zeros(H) if g_h_final is None else g_h_final.copy()
    uz, ur, uh_ = u[:H], u[H : 2 * H], u[2 * H :]
    for t, h_prev, z, r, q, c in reversed(steps):
        dh = gh + g_states[t]
        dz = dh * (h_prev - c)
        dc = dh * (1.0 - z)
        dhp = dh * z
        dhin = dc * (1.0 - c * c)
        dr = dhin * q
        dq = dhin * r
        dzin = dz * z * (1.0 - z)
        drin = dr * r * (1.0 - r)
        ga[t, :H] = dzin
        ga[t, H : 2 * H] = drin
        ga[t, 2 * H :] = dhin
        gu[:H] += np.outer(dzin, h_prev)
        gu[H : 2 * H] += np.outer(drin, h_prev)
        gu[2 * H :] += np.outer(dq, h_prev)
        gh = dhp + uz.T @ dzin + ur.T @ drin + uh_.T @ dq
    return ga, gu, gh


def gru_layer(x: np.ndarray, params: GruParams, direction: str = "fwd", h0: np.ndarray | None = None):
    """Full unidirectional GRU layer over a (T, D) input.

    The input affine ``a = x @ w.T + b`` is computed once for all steps;
    the recurrence is then applied forward or backward in time. Returns
    (all hidden states as (T, H), cache).
    """
    if direction not in ("fwd", "bwd"):
        raise ValueError("direction must be 'fwd' or 'bwd'")
    a = x @ params.w.T + params.b
    h0 = np.zeros(params.hidden) if h0 is None else h0
    order = range(a.shape[0]) if direction == "fwd" else range(a.shape[0] - 1, -1, -1)
    states, steps, h_last = _recurrence(a, params.u, order, h0)
    return states, (x, params, steps, h_last)


def gru_layer_backward(g_states: np.ndarray, cache):
    """BPTT for :func:`gru_layer`. Returns (gx, dict of parameter grads, gh0)."""
    x, params, steps, _ = cache
    ga, gu, gh0 = _recurrence_backward(g_states, steps, params.u)
    gw = ga.T @ x
    gb = ga.sum(axis=0)
    gx = ga @ params.w
    return gx, {"w": gw, "u": gu, "b": gb}, gh0


def bgru(x: np.ndarray, fwd_params: GruParams, bwd_params: GruParams):
    """Full-utterance bidirectional layer: concatenated fwd and bwd states (T, 2H)."""
    hf, cf = gru_layer(x, fwd_params, "fwd")
    hb, cb = gru_layer(x, bwd_params, "bwd")
    return np.concatenate([hf, hb], axis=1), (cf, cb, fwd_params.hidden)


def bgru_backward(gy: np.ndarray, cache):
    cf, cb, H = cache
    gx_f, gf, _ = gru_layer_backward(gy[:, :H], cf)
    gx_b, gb_, _ = gru_layer_backward(gy[:, H:], cb)
    return gx_f + gx_b, {"fwd": gf, "bwd": gb_}


# ---------------------------------------------------------------------------
# Latency-controlled bidirectional GRU
# ---------------------------------------------------------------------------


@dataclass
class LcBgruConfig:
    """Chunk geometry: window `c_w` frames, advance `c_s` frames per chunk.

    The layer's lookahead is ``c_w - c_s`` frames.
    """

    c_w: int
    c_s: int

    def __post_init__(self):
        if not (1 <= self.c_s <= self.c_w):
            raise ValueError("require 1 <= c_s <= c_w")

    @property
    def lookahead(self) -> int:
        return self.c_w - self.c_s


@dataclass
class LcBgruParams:
    """Shared input affine plus per-direction recurrent weights."""

    w: np.ndarray
    b: np.ndarray
    u_fwd: np.ndarray
    u_bwd: np.ndarray

    @property
    def hidden(self) -> int:
        return self.u_fwd.shape[1]

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator) -> "LcBgruParams":
        bw = 1.0 / math.sqrt(input_dim)
        bu = 1.0 / math.sqrt(hidden)
        return cls(
            w=rng.uniform(-bw, bw, (3 * hidden, input_dim)),
            b=np.zeros(3 * hidden),
            u_fwd=rng.uniform(-bu, bu, (3 * hidden, hidden)),
            u_bwd=rng.uniform(-bu, bu, (3 * hidden, hidden)),
        )


def _chunk_starts(T: int, c_s: int):
    return range(0, T, c_s)


def lc_bgru_from_affine(a: np.ndarray, u_fwd: np.ndarray, u_bwd: np.ndarray, cfg: LcBgruConfig):
    """Chunked bidirectional recurrence over a precomputed affine (T, 3H).

    The forward recurrence is continuous over the whole input. The
    backward recurrence restarts from zero at every chunk start
    {0, c_s, 2*c_s, ...}, runs right-to-left over at most c_w frames, and
    only its states for the first c_s frames of the chunk are emitted.
    """
    T = a.shape[0]
    H = u_fwd.shape[1]
    hf, steps_f, _ = _recurrence(a, u_fwd, range(T), np.zeros(H))
    hb = np.zeros((T, H))
    chunk_caches = []
    for p in _chunk_starts(T, cfg.c_s):
        e = min(p + cfg.c_w, T)
        states, steps, _ = _recurrence(a[p:e], u_bwd, range(e - p - 1, -1, -1), np.zeros(H))
        emit = min(cfg.c_s, e - p)
        hb[p : p + emit] = states[:emit]
        chunk_caches.append((p, e, steps))
    y = np.concatenate([hf, hb], axis=1)
    return y, (a.shape, steps_f, chunk_caches, u_fwd, u_bwd, cfg)


def lc_bgru_from_affine_backward(gy: np.ndarray, cache):
    a_shape, steps_f, chunk_caches, u_fwd, u_bwd, cfg = cache
    H = u_fwd.shape[1]
    ga_f, gu_fwd, _ = _recurrence_backward(gy[:, :H], steps_f, u_fwd)
    ga = ga_f
    gu_bwd = np.zeros_like(u_bwd)
    for p, e, steps in chunk_caches:
        g_chunk = np.zeros((e - p, H))
        emit = min(cfg.c_s, e - p)
        g_chunk[:emit] = gy[p : p + emit, H:]
        ga_c, gu_c, _ = _recurrence_backward(g_chunk, steps, u_bwd)
        ga[p:e] += ga_c
        gu_bwd += gu_c
    return ga, gu_fwd, gu_bwd


def lc_bgru(x: np.ndarray, params: LcBgruParams, cfg: LcBgruConfig):
    """Latency-controlled bidirectional layer over a (T, D) input -> (T, 2H).

    Both directions consume the same input affine; see
    :func:`lc_bgru_from_affine` for the chunking semantics. With
    ``c_w = c_s = T`` this reduces exactly to :func:`bgru` with shared
    affine parameters.
    """
    a = x @ params.w.T + params.b
    y, inner = lc_bgru_from_affine(a, params.u_fwd, params.u_bwd, cfg)
    return y, (x, params, inner)


def lc_bgru_backward(gy: np.ndarray, cache):
    x, params, inner = cache
    ga, gu_fwd, gu_bwd = lc_bgru_from_affine_backward(gy, inner)
    gx = ga @ params.w
    return gx, {"w": ga.T @ x, "b": ga.sum(axis=0), "u_fwd": gu_fwd, "u_bwd": gu_bwd}


def run_bgru_as_lc_bgru(
    x: np.ndarray, fwd_params: GruParams, bwd_params: GruParams, c_w: int, c_s: int
) -> np.ndarray:
    """Evaluate a fully bidirectional layer's weights in chunked mode.

    Forward states are carried across windows; backward states are reset
    at each window start and only the first c_s outputs per window kept.
    This is an inference path for checkpoints trained bidirectionally, so
    no backward pass is provided.
    """
    cfg = LcBgruConfig(c_w, c_s)
    T = x.shape[0]
    H = fwd_params.hidden
    af = x @ fwd_params.w.T + fwd_params.b
    ab = x @ bwd_params.w.T + bwd_params.b
    hf, _, _ = _recurrence(af, fwd_params.u, range(T), np.zeros(H))
    hb = np.zeros((T, H))
    for p in _chunk_starts(T, cfg.c_s):
        e = min(p + cfg.c_w, T)
        states, _, _ = _recurrence(ab[p:e], bwd_params.u, range(e - p - 1, -1, -1), np.zeros(H))
        emit = min(cfg.c_s, e - p)
        hb[p : p + emit] = states[:emit]
    return np.concatenate([hf, hb], axis=1)


# ---------------------------------------------------------------------------
# Lookahead convolution
# ---------------------------------------------------------------------------


@dataclass
class LaConvSpec:
    """Per-feature linear combination over the strictly-future window [t+1, t+C]."""

    context: int

    def __post_init__(self):
        if self.context < 1:
            raise ValueError("context must be >= 1")


def la_conv_forward(x: np.ndarray, w: np.ndarray):
    """y[t, h] = sum_j w[j, h] * x[t + 1 + j, h]; out-of-range frames are zero."""
    T, H = x.shape
    C = w.shape[0]
    if w.shape != (C, H):
        raise ValueError("weights must be (context, features)")
    y = np.zeros_like(x)
    for j in range(C):
        n = T - 1 - j
        if n <= 0:
            break
        y[:n] += w[j] * x[j + 1 :]
    return y, (x, w)


def la_conv_backward(gy: np.ndarray, cache):
    x, w = cache
    T = x.shape[0]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for j in range(w.shape[0]):
        n = T - 1 - j
        if n <= 0:
            break
        gw[j] = np.sum(gy[:n] * x[j + 1 :], axis=0)
        gx[j + 1 :] += w[j] * gy[:n]
    return gx, gw


# ---------------------------------------------------------------------------
# Fully connected and softmax
# ---------------------------------------------------------------------------


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w.T + b, (x, w)


def linear_backward(gy: np.ndarray, cache):
    x, w = cache
    return gy @ w, gy.T @ x, gy.sum(axis=0)


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-normalized, max-subtracted softmax."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(gy: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Given y = softmax(x) and dL/dy, return dL/dx."""
    dot = np.sum(gy * y, axis=-1, keepdims=True)
    return y * (gy - dot)


def log_softmax_backward(gy: np.ndarray, log_y: np.ndarray) -> np.ndarray:
    """Given log_y = log_softmax(x) and dL/dlog_y, return dL/dx."""
    return gy - np.exp(log_y) * gy.sum(axis=-1, keepdims=True)


def relu(x: np.ndarray):
    return np.maximum(x, 0.0), x > 0


def relu_backward(gy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return gy * mask
