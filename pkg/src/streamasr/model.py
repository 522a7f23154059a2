"""Model assembly: layer stacks, presets, lookahead accounting, checkpoints.

A model is a frontend stage (static log compression + normalization, or
the trainable per-channel normalization), a 2-D convolution stack, a
recurrent stack, an optional lookahead convolution, and one linear +
log-softmax head per output inventory ("char" always, "gram" optionally).

Forward/backward run over a batch (list) of utterances so sequence-wise
batch normalization can pool statistics across the whole batch's frames.
A loaded model is immutable and can be shared by concurrent inference
sessions; training owns its own mutable copy.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import layers
from .frontend import LOG_FLOOR, NORM_EPS, PcenParams, Spectrogram, SpectrogramConfig, pcen_backward, pcen_forward
from .layers import (
    BatchNormStats,
    Conv2dSpec,
    LcBgruConfig,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    la_conv_backward,
    la_conv_forward,
    linear_backward,
    linear_forward,
    log_softmax,
    log_softmax_backward,
    relu,
    relu_backward,
)

UNBOUNDED = math.inf


@dataclass
class RecurrentSpec:
    """One slot of the recurrent stack: 'fwd', 'bgru' or 'lc' (chunked)."""

    kind: str
    c_w: int | None = None
    c_s: int | None = None

    def __post_init__(self):
        if self.kind not in ("fwd", "bgru", "lc"):
            raise ValueError(f"unknown recurrent kind {self.kind!r}")
        if self.kind == "lc":
            LcBgruConfig(self.c_w, self.c_s)  # validates


@dataclass
class ModelSpec:
    """Complete architecture description; everything needed to rebuild shapes."""

    alphabet: str
    frontend: str = "log"
    sample_rate: int = 16000
    hop_ms: float = 10.0
    window_ms: float = 20.0
    conv: list[Conv2dSpec] = field(default_factory=list)
    recurrent: list[RecurrentSpec] = field(default_factory=list)
    hidden: int = 96
    la_context: int | None = None
    grams: list[str] | None = None
    use_batchnorm: bool = True
    bgru_as_lc: tuple[int, int] | None = None  # evaluate bgru slots chunked

    def __post_init__(self):
        if self.frontend not in ("log", "pcen"):
            raise ValueError(f"unknown frontend {self.frontend!r}")
        if self.hidden < 1:
            raise ValueError("hidden size must be >= 1")
        if not self.recurrent:
            raise ValueError("at least one recurrent layer required")

    @property
    def spectrogram_config(self) -> SpectrogramConfig:
        return SpectrogramConfig.for_rate(self.sample_rate, self.hop_ms, self.window_ms)

    @property
    def n_bins(self) -> int:
        return self.spectrogram_config.n_bins

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv"] = [
            {"filters": c.filters, "kernel": list(c.kernel), "in_channels": c.in_channels, "stride": list(c.stride)}
            for c in self.conv
        ]
        d["recurrent"] = [{"kind": r.kind, "c_w": r.c_w, "c_s": r.c_s} for r in self.recurrent]
        d["bgru_as_lc"] = list(self.bgru_as_lc) if self.bgru_as_lc else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["conv"] = [
            Conv2dSpec(c["filters"], tuple(c["kernel"]), c["in_channels"], tuple(c["stride"])) for c in d["conv"]
        ]
        d["recurrent"] = [RecurrentSpec(r["kind"], r["c_w"], r["c_s"]) for r in d["recurrent"]]
        if d.get("bgru_as_lc"):
            d["bgru_as_lc"] = tuple(d["bgru_as_lc"])
        return cls(**d)


def _paper_convs(time_resolution: int = 2) -> list[Conv2dSpec]:
    second_time_stride = 1 if time_resolution == 2 else 2
    return [
        Conv2dSpec(32, (41, 11), 1, (2, 2)),
        Conv2dSpec(32, (21, 11), 32, (2, second_time_stride)),
    ]


def baseline_spec(alphabet: str, width: int = 96, sample_rate: int = 16000, time_resolution: int = 2, grams=None) -> ModelSpec:
    """Reference stack: log frontend, two conv layers, three forward
    recurrent layers, lookahead convolution (context 30), linear head."""
    return ModelSpec(
        alphabet=alphabet,
        frontend="log",
        sample_rate=sample_rate,
        conv=_paper_convs(time_resolution),
        recurrent=[RecurrentSpec("fwd"), RecurrentSpec("fwd"), RecurrentSpec("fwd")],
        hidden=width,
        la_context=30,
        grams=list(grams) if grams else None,
    )


def proposed_spec(alphabet: str, width: int = 96, sample_rate: int = 16000, time_resolution: int = 2, grams=None) -> ModelSpec:
    """Streaming stack: trainable normalization frontend, two conv layers,
    two forward recurrent layers and one chunked bidirectional layer
    (window 30, step 10, i.e. 20 frames of lookahead)."""
    return ModelSpec(
        alphabet=alphabet,
        frontend="pcen",
        sample_rate=sample_rate,
        conv=_paper_convs(time_resolution),
        recurrent=[RecurrentSpec("fwd"), RecurrentSpec("fwd"), RecurrentSpec("lc", 30, 10)],
        hidden=width,
        la_context=None,
        grams=list(grams) if grams else None,
    )


def bidirectional_spec(alphabet: str, width: int = 96, sample_rate: int = 16000, grams=None) -> ModelSpec:
    """Non-streamable target: three fully bidirectional recurrent layers."""
    return ModelSpec(
        alphabet=alphabet,
        frontend="log",
        sample_rate=sample_rate,
        conv=_paper_convs(),
        recurrent=[RecurrentSpec("bgru"), RecurrentSpec("bgru"), RecurrentSpec("bgru")],
        hidden=width,
        la_context=None,
        grams=list(grams) if grams else None,
    )


PRESETS = {"baseline": baseline_spec, "proposed": proposed_spec, "bidirectional": bidirectional_spec}


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


class _FrontendStage:
    def __init__(self, name, spec: ModelSpec):
        self.name = name
        self.kind = spec.frontend
        self.n_bins = spec.n_bins

    def build(self, rng, params, buffers):
        if self.kind == "pcen":
            p = PcenParams.default(self.n_bins)
            params[f"{self.name}.log_alpha"] = p.log_alpha
            params[f"{self.name}.log_delta"] = p.log_delta
            params[f"{self.name}.log_r"] = p.log_r
            params[f"{self.name}.logit_s"] = p.logit_s
        else:
            buffers[f"{self.name}.mean"] = np.zeros(self.n_bins)
            buffers[f"{self.name}.var"] = np.ones(self.n_bins)
        return self.n_bins

    def _pcen_params(self, params) -> PcenParams:
        return PcenParams(
            params[f"{self.name}.log_alpha"],
            params[f"{self.name}.log_delta"],
            params[f"{self.name}.log_r"],
            params[f"{self.name}.logit_s"],
        )

    def forward(self, xs, mode, params, buffers):
        ys, caches = [], []
        if self.kind == "pcen":
            p = self._pcen_params(params)
            for x in xs:
                out, cache = pcen_forward(Spectrogram(x, 10.0, log_compressed=False), p)
                ys.append(out.values)
                caches.append(cache)
        else:
            mean = buffers[f"{self.name}.mean"]
            std = np.sqrt(buffers[f"{self.name}.var"] + NORM_EPS)
            for x in xs:
                ys.append((np.log(x + LOG_FLOOR) - mean) / std)
                caches.append(None)
        return ys, caches

    def backward(self, gys, caches, params):
        grads = {}
        if self.kind == "pcen":
            for gy, cache in zip(gys, caches):
                _, gp = pcen_backward(gy, cache)
                for key, val in gp.items():
                    name = f"{self.name}.{key}"
                    grads[name] = grads.get(name, 0.0) + val
        return None, grads  # input gradients are never needed


class _BatchNormHelper:
    """Shared plumbing: normalize a list of row blocks over their union."""

    @staticmethod
    def forward(blocks, prefix, mode, params, buffers):
        stats = BatchNormStats(
            gamma=params[f"{prefix}.gamma"],
            beta=params[f"{prefix}.beta"],
            running_mean=buffers[f"{prefix}.mean"],
            running_var=buffers[f"{prefix}.var"],
        )
        sizes = [b.shape[0] for b in blocks]
        big = np.concatenate(blocks, axis=0)
        out, cache = batchnorm_forward(big, stats, mode)
        buffers[f"{prefix}.mean"] = stats.running_mean
        buffers[f"{prefix}.var"] = stats.running_var
        return _split(out, sizes), (cache, sizes)

    @staticmethod
    def backward(gblocks, state, prefix):
        cache, sizes = state
        gbig = np.concatenate(gblocks, axis=0)
        gx, ggamma, gbeta = batchnorm_backward(gbig, cache)
        return _split(gx, sizes), {f"{prefix}.gamma": ggamma, f"{prefix}.beta": gbeta}


def _split(big, sizes):
    out, pos = [], 0
    for s in sizes:
        out.append(big[pos : pos + s])
        pos += s
    return out


class _ConvStage:
    def __init__(self, name, spec: Conv2dSpec, use_bn: bool):
        self.name = name
        self.spec = spec
        self.use_bn = use_bn

    def build(self, rng, params, buffers):
        w, b = layers.conv2d_init(self.spec, rng)
        params[f"{self.name}.w"] = w
        params[f"{self.name}.b"] = b
        if self.use_bn:
            params[f"{self.name}.gamma"] = np.ones(self.spec.filters)
            params[f"{self.name}.beta"] = np.zeros(self.spec.filters)
            buffers[f"{self.name}.mean"] = np.zeros(self.spec.filters)
            buffers[f"{self.name}.var"] = np.ones(self.spec.filters)

    def forward(self, xs, mode, params, buffers):
        w, b = params[f"{self.name}.w"], params[f"{self.name}.b"]
        ys, conv_caches, shapes = [], [], []
        squeeze = False
        for x in xs:
            if x.ndim == 2:  # first conv takes the raw (T, F) features
                x = x[:, :, None]
                squeeze = True
            y, cache = conv2d_forward(x, self.spec, w, b)
            ys.append(y)
            conv_caches.append(cache)
            shapes.append(y.shape)
        bn_state = None
        if self.use_bn:
            blocks = [y.reshape(-1, self.spec.filters) for y in ys]
            normed, bn_state = _BatchNormHelper.forward(blocks, self.name, mode, params, buffers)
            ys = [n.reshape(s) for n, s in zip(normed, shapes)]
        outs, masks = [], []
        for y in ys:
            out, mask = relu(y)
            outs.append(out)
            masks.append(mask)
        return outs, (conv_caches, bn_state, masks, shapes, squeeze)

    def backward(self, gys, cache, params):
        conv_caches, bn_state, masks, shapes, squeeze = cache
        gys = [relu_backward(g, m) for g, m in zip(gys, masks)]
        grads = {}
        if self.use_bn:
            blocks = [g.reshape(-1, self.spec.filters) for g in gys]
            gblocks, bn_grads = _BatchNormHelper.backward(blocks, bn_state, self.name)
            grads.update(bn_grads)
            gys = [g.reshape(s) for g, s in zip(gblocks, shapes)]
        gxs = []
        gw = gb = 0.0
        for g, c in zip(gys, conv_caches):
            gx, gw_i, gb_i = conv2d_backward(g, c)
            gw = gw + gw_i
            gb = gb + gb_i
            gxs.append(gx[:, :, 0] if squeeze else gx)
        grads[f"{self.name}.w"] = gw
        grads[f"{self.name}.b"] = gb
        return gxs, grads


class _FlattenStage:
    name = "flatten"

    def forward(self, xs, mode, params, buffers):
        shapes = [x.shape for x in xs]
        return [x.reshape(x.shape[0], -1) for x in xs], shapes

    def backward(self, gys, shapes, params):
        return [g.reshape(s) for g, s in zip(gys, shapes)], {}


class _RecurrentStage:
    def __init__(self, name, rspec: RecurrentSpec, in_dim: int, hidden: int, use_bn: bool):
        self.name = name
        self.rspec = rspec
        self.in_dim = in_dim
        self.hidden = hidden
        self.use_bn = use_bn
        self.out_dim = hidden if rspec.kind == "fwd" else 2 * hidden

    def _bn_names(self):
        if self.rspec.kind == "bgru":
            return [f"{self.name}.fwd", f"{self.name}.bwd"]
        return [self.name]

    def build(self, rng, params, buffers):
        h, d = self.hidden, self.in_dim
        bw, bu = 1.0 / math.sqrt(d), 1.0 / math.sqrt(h)
        if self.rspec.kind == "fwd":
            params[f"{self.name}.w"] = rng.uniform(-bw, bw, (3 * h, d))
            params[f"{self.name}.b"] = np.zeros(3 * h)
            params[f"{self.name}.u"] = rng.uniform(-bu, bu, (3 * h, h))
        elif self.rspec.kind == "lc":
            params[f"{self.name}.w"] = rng.uniform(-bw, bw, (3 * h, d))
            params[f"{self.name}.b"] = np.zeros(3 * h)
            params[f"{self.name}.u_fwd"] = rng.uniform(-bu, bu, (3 * h, h))
            params[f"{self.name}.u_bwd"] = rng.uniform(-bu, bu, (3 * h, h))
        else:  # bgru
            for side in ("fwd", "bwd"):
                params[f"{self.name}.{side}.w"] = rng.uniform(-bw, bw, (3 * h, d))
                params[f"{self.name}.{side}.b"] = np.zeros(3 * h)
                params[f"{self.name}.{side}.u"] = rng.uniform(-bu, bu, (3 * h, h))
        if self.use_bn:
            for prefix in self._bn_names():
                params[f"{prefix}.gamma"] = np.ones(3 * h)
                params[f"{prefix}.beta"] = np.zeros(3 * h)
                buffers[f"{prefix}.mean"] = np.zeros(3 * h)
                buffers[f"{prefix}.var"] = np.ones(3 * h)

    def _affine(self, xs, w, b, prefix, mode, params, buffers):
        blocks = [x @ w.T + b for x in xs]
        bn_state = None
        if self.use_bn:
            blocks, bn_state = _BatchNormHelper.forward(blocks, prefix, mode, params, buffers)
        return blocks, bn_state

    def forward(self, xs, mode, params, buffers, bgru_as_lc=None):
        h = self.hidden
        kind = self.rspec.kind
        if kind == "fwd":
            affines, bn_state = self._affine(
                xs, params[f"{self.name}.w"], params[f"{self.name}.b"], self.name, mode, params, buffers
            )
            ys, steps_list = [], []
            for a in affines:
                states, steps, _ = layers._recurrence(a, params[f"{self.name}.u"], range(a.shape[0]), np.zeros(h))
                ys.append(states)
                steps_list.append(steps)
            return ys, (xs, bn_state, steps_list, None)
        if kind == "lc":
            affines, bn_state = self._affine(
                xs, params[f"{self.name}.w"], params[f"{self.name}.b"], self.name, mode, params, buffers
            )
            cfg = LcBgruConfig(self.rspec.c_w, self.rspec.c_s)
            ys, inners = [], []
            for a in affines:
                y, inner = layers.lc_bgru_from_affine(a, params[f"{self.name}.u_fwd"], params[f"{self.name}.u_bwd"], cfg)
                ys.append(y)
                inners.append(inner)
            return ys, (xs, bn_state, inners, None)
        # bgru
        af, bn_f = self._affine(
            xs, params[f"{self.name}.fwd.w"], params[f"{self.name}.fwd.b"], f"{self.name}.fwd", mode, params, buffers
        )
        ab, bn_b = self._affine(
            xs, params[f"{self.name}.bwd.w"], params[f"{self.name}.bwd.b"], f"{self.name}.bwd", mode, params, buffers
        )
        ys, caches = [], []
        for a_f, a_b in zip(af, ab):
            T = a_f.shape[0]
            if bgru_as_lc is not None:
                c_w, c_s = bgru_as_lc
                hf, _, _ = layers._recurrence(a_f, params[f"{self.name}.fwd.u"], range(T), np.zeros(h))
                hb = np.zeros((T, h))
                for p in range(0, T, c_s):
                    e = min(p + c_w, T)
                    states, _, _ = layers._recurrence(
                        a_b[p:e], params[f"{self.name}.bwd.u"], range(e - p - 1, -1, -1), np.zeros(h)
                    )
                    emit = min(c_s, e - p)
                    hb[p : p + emit] = states[:emit]
                ys.append(np.concatenate([hf, hb], axis=1))
                caches.append(None)
            else:
                hf, steps_f, _ = layers._recurrence(a_f, params[f"{self.name}.fwd.u"], range(T), np.zeros(h))
                hb, steps_b, _ = layers._recurrence(a_b, params[f"{self.name}.bwd.u"], range(T - 1, -1, -1), np.zeros(h))
                ys.append(np.concatenate([hf, hb], axis=1))
                caches.append((steps_f, steps_b))
        return ys, (xs, (bn_f, bn_b), caches, None)

    def backward(self, gys, cache, params, buffers=None):
        xs, bn_state, inner, _ = cache
        h = self.hidden
        kind = self.rspec.kind
        grads = {}
        if kind == "fwd":
            u = params[f"{self.name}.u"]
            ga_list, gu = [], 0.0
            for g, steps in zip(gys, inner):
                ga, gu_i, _ = layers._recurrence_backward(g, steps, u)
                ga_list.append(ga)
                gu = gu + gu_i
            grads[f"{self.name}.u"] = gu
            return self._affine_backward(ga_list, xs, bn_state, self.name, params, grads)
        if kind == "lc":
            ga_list, gu_f, gu_b = [], 0.0, 0.0
            for g, inn in zip(gys, inner):
                ga, gf, gb_ = layers.lc_bgru_from_affine_backward(g, inn)
                ga_list.append(ga)
                gu_f = gu_f + gf
                gu_b = gu_b + gb_
            grads[f"{self.name}.u_fwd"] = gu_f
            grads[f"{self.name}.u_bwd"] = gu_b
            return self._affine_backward(ga_list, xs, bn_state, self.name, params, grads)
        # bgru
        bn_f, bn_b = bn_state
        uf, ub = params[f"{self.name}.fwd.u"], params[f"{self.name}.bwd.u"]
        ga_f_list, ga_b_list, gu_f, gu_b = [], [], 0.0, 0.0
        for g, steps in zip(gys, inner):
            if steps is None:
                raise RuntimeError("chunked-evaluation mode has no backward pass")
            steps_f, steps_b = steps
            ga_f, gif, _ = layers._recurrence_backward(g[:, :h], steps_f, uf)
            ga_b, gib, _ = layers._recurrence_backward(g[:, h:], steps_b, ub)
            ga_f_list.append(ga_f)
            ga_b_list.append(ga_b)
            gu_f = gu_f + gif
            gu_b = gu_b + gib
        grads[f"{self.name}.fwd.u"] = gu_f
        grads[f"{self.name}.bwd.u"] = gu_b
        gx_f, _ = self._affine_backward(ga_f_list, xs, bn_f, f"{self.name}.fwd", params, grads)
        gx_b, _ = self._affine_backward(ga_b_list, xs, bn_b, f"{self.name}.bwd", params, grads)
        return [a + b for a, b in zip(gx_f, gx_b)], grads

    def _affine_backward(self, ga_list, xs, bn_state, prefix, params, grads):
        if self.use_bn:
            ga_list, bn_grads = _BatchNormHelper.backward(ga_list, bn_state, prefix)
            grads.update(bn_grads)
        w = params[f"{prefix}.w"]
        gw = gb = 0.0
        gxs = []
        for ga, x in zip(ga_list, xs):
            gw = gw + ga.T @ x
            gb = gb + ga.sum(axis=0)
            gxs.append(ga @ w)
        grads[f"{prefix}.w"] = gw
        grads[f"{prefix}.b"] = gb
        return gxs, grads


class _LaConvStage:
    def __init__(self, name, context: int, width: int):
        self.name = name
        self.context = context
        self.width = width

    def build(self, rng, params, buffers):
        bound = 1.0 / math.sqrt(self.context)
        params[f"{self.name}.w"] = rng.uniform(-bound, bound, (self.context, self.width))

    def forward(self, xs, mode, params, buffers):
        w = params[f"{self.name}.w"]
        ys, caches = [], []
        for x in xs:
            y, c = la_conv_forward(x, w)
            ys.append(y)
            caches.append(c)
        return ys, caches

    def backward(self, gys, caches, params):
        gxs, gw = [], 0.0
        for g, c in zip(gys, caches):
            gx, gw_i = la_conv_backward(g, c)
            gxs.append(gx)
            gw = gw + gw_i
        return gxs, {f"{self.name}.w": gw}


class _HeadStage:
    def __init__(self, name, in_dim: int, out_dim: int):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim

    def build(self, rng, params, buffers):
        bound = 1.0 / math.sqrt(self.in_dim)
        params[f"{self.name}.w"] = rng.uniform(-bound, bound, (self.out_dim, self.in_dim))
        params[f"{self.name}.b"] = np.zeros(self.out_dim)

    def forward(self, xs, mode, params, buffers):
        w, b = params[f"{self.name}.w"], params[f"{self.name}.b"]
        lps, caches = [], []
        for x in xs:
            logits, lin_cache = linear_forward(x, w, b)
            lp = log_softmax(logits)
            lps.append(lp)
            caches.append((lin_cache, lp))
        return lps, caches

    def backward(self, gys, caches, params):
        gxs, gw, gb = [], 0.0, 0.0
        for g, (lin_cache, lp) in zip(gys, caches):
            glogits = log_softmax_backward(g, lp)
            gx, gw_i, gb_i = linear_backward(glogits, lin_cache)
            gxs.append(gx)
            gw = gw + gw_i
            gb = gb + gb_i
        return gxs, {f"{self.name}.w": gw, f"{self.name}.b": gb}


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class Model:
    """A built network: spec, trainable params, non-trained buffers, stages."""

    def __init__(self, spec: ModelSpec, params: dict, buffers: dict, stages: list, heads: list):
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.stages = stages  # trunk stages in order
        self.heads = heads

    @property
    def alphabet_symbols(self) -> list[str]:
        return [""] + list(self.spec.alphabet)

    @property
    def gram_symbols(self) -> list[str] | None:
        return ([""] + list(self.spec.grams)) if self.spec.grams else None

    def parameter_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def forward_batch(self, features: list, mode: str = "eval"):
        """Run a batch of power spectrograms; returns (list of head->log-probs, cache)."""
        xs = []
        for f in features:
            x = f.values if isinstance(f, Spectrogram) else np.asarray(f, dtype=np.float64)
            if x.ndim != 2 or x.shape[1] != self.spec.n_bins:
                raise ValueError("feature shape error")
            xs.append(x)
        caches = []
        for stage in self.stages:
            if isinstance(stage, _RecurrentStage):
                xs, cache = stage.forward(
                    xs, mode, self.params, self.buffers,
                    bgru_as_lc=self.spec.bgru_as_lc if stage.rspec.kind == "bgru" else None,
                )
            else:
                xs, cache = stage.forward(xs, mode, self.params, self.buffers)
            caches.append(cache)
        outputs = [dict() for _ in xs]
        head_caches = {}
        for head in self.heads:
            lps, hc = head.forward(xs, mode, self.params, self.buffers)
            head_caches[head.name] = hc
            for out, lp in zip(outputs, lps):
                out[head.name.removeprefix("head_")] = lp
        return outputs, (caches, head_caches, len(xs))

    def backward_batch(self, grad_outputs: list, cache) -> dict:
        """Backprop per-head log-prob gradients; returns parameter gradients."""
        caches, head_caches, n = cache
        grads: dict[str, np.ndarray] = {}
        gtrunk = None
        for head in self.heads:
            key = head.name.removeprefix("head_")
            gys = [g.get(key) for g in grad_outputs]
            if all(g is None for g in gys):
                continue
            zero = [np.zeros_like(hc[1]) for hc in head_caches[head.name]]
            gys = [z if g is None else g for g, z in zip(gys, zero)]
            gxs, hgrads = head.backward(gys, head_caches[head.name], self.params)
            _merge(grads, hgrads)
            gtrunk = gxs if gtrunk is None else [a + b for a, b in zip(gtrunk, gxs)]
        if gtrunk is None:
            raise ValueError("no head gradients supplied")
        for stage, scache in zip(reversed(self.stages), reversed(caches)):
            gtrunk, sgrads = stage.backward(gtrunk, scache, self.params)
            _merge(grads, sgrads)
            if gtrunk is None:  # frontend consumed the rest
                break
        return grads

    def forward(self, features, mode: str = "eval") -> dict:
        outs, _ = self.forward_batch([features], mode)
        return outs[0]

    def clone(self) -> "Model":
        m = build_model(self.spec, seed=0)
        for k, v in self.params.items():
            m.params[k][...] = v
        for k, v in self.buffers.items():
            m.buffers[k][...] = v
        return m


def _merge(acc: dict, new: dict):
    for k, v in new.items():
        acc[k] = acc[k] + v if k in acc else v


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Deterministically initialize a model from its spec and a seed.

    Weights are uniform with bounds scaled by 1/sqrt(fan-in); biases are
    zero. The same (spec, seed) pair always yields bit-identical tensors.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    stages: list = []

    frontend = _FrontendStage("frontend", spec)
    width = frontend.build(rng, params, buffers)
    stages.append(frontend)

    channels = 1
    for i, cs in enumerate(spec.conv):
        if cs.in_channels != channels:
            raise ValueError(f"conv{i} expects {cs.in_channels} channels, got {channels}")
        stage = _ConvStage(f"conv{i}", cs, spec.use_batchnorm)
        stage.build(rng, params, buffers)
        stages.append(stage)
        width = -(-width // cs.stride[0])
        channels = cs.filters
    if spec.conv:
        stages.append(_FlattenStage())
        width = width * channels

    for i, rs in enumerate(spec.recurrent):
        stage = _RecurrentStage(f"rec{i}", rs, width, spec.hidden, spec.use_batchnorm)
        stage.build(rng, params, buffers)
        stages.append(stage)
        width = stage.out_dim

    if spec.la_context:
        stage = _LaConvStage("laconv", spec.la_context, width)
        stage.build(rng, params, buffers)
        stages.append(stage)

    heads = [_HeadStage("head_char", width, len(spec.alphabet) + 1)]
    heads[0].build(rng, params, buffers)
    if spec.grams:
        gram_head = _HeadStage("head_gram", width, len(spec.grams) + 1)
        gram_head.build(rng, params, buffers)
        heads.append(gram_head)
    return Model(spec, params, buffers, stages, heads)


def model_forward(model: Model, features, mode: str = "eval") -> dict:
    """Per-head log-probabilities (T' x V) for one utterance."""
    return model.forward(features, mode)


def total_time_stride(spec: ModelSpec) -> int:
    s = 1
    for c in spec.conv:
        s *= c.stride[1]
    return s


def lookahead_frames(spec: ModelSpec):
    """Future post-convolution frames an output may depend on.

    Returns (nominal, worst_case). Each chunked bidirectional layer
    contributes window - step nominally plus up to step - 1 frames of
    chunk-granularity jitter; the lookahead convolution contributes its
    context exactly; causal convolutions contribute nothing. A full
    bidirectional layer (not evaluated chunked) makes both unbounded.
    """
    nominal = worst = 0.0
    for r in spec.recurrent:
        if r.kind == "lc":
            nominal += r.c_w - r.c_s
            worst += r.c_w - 1
        elif r.kind == "bgru":
            if spec.bgru_as_lc is None:
                return UNBOUNDED, UNBOUNDED
            c_w, c_s = spec.bgru_as_lc
            nominal += c_w - c_s
            worst += c_w - 1
    if spec.la_context:
        nominal += spec.la_context
        worst += spec.la_context
    return nominal, worst


def is_deployable(spec: ModelSpec) -> bool:
    return lookahead_frames(spec)[0] != UNBOUNDED


def convert_bgru_to_lc(model: Model, c_w: int, c_s: int) -> Model:
    """Flag a bidirectionally-trained model for chunked evaluation.

    Shares parameter storage with the original; the returned model's
    bidirectional slots reset their backward state every `c_s` frames and
    keep only the first `c_s` outputs of each `c_w`-frame window.
    """
    LcBgruConfig(c_w, c_s)
    spec = ModelSpec.from_dict(model.spec.to_dict())
    spec.bgru_as_lc = (c_w, c_s)
    return Model(spec, model.params, model.buffers, model.stages, model.heads)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SCK1"


def save_checkpoint(model: Model, path, metadata: dict | None = None) -> None:
    """Bit-exact serialization: JSON manifest with per-tensor CRC32 plus a
    little-endian float64 blob."""
    names = list(model.params) + [f"buffer:{k}" for k in model.buffers]
    tensors = list(model.params.values()) + list(model.buffers.values())
    entries = []
    offset = 0
    blobs = []
    for name, arr in zip(names, tensors):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(
            {
                "name": name,
                "dtype": "float64",
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": "SCK1",
        "spec": model.spec.to_dict(),
        "meta": metadata or {},
        "tensors": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(mbytes).to_bytes(4, "little"))
        fh.write(zlib.crc32(mbytes).to_bytes(4, "little"))
        fh.write(mbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, bgru_as_lc: tuple[int, int] | None = None):
    """Rebuild a model from a checkpoint file; returns (model, metadata).

    Passing `bgru_as_lc=(c_w, c_s)` loads a bidirectionally-trained
    checkpoint for chunked evaluation (recorded on the returned spec).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("version mismatch")
    mlen = int.from_bytes(blob[4:8], "little")
    mcrc = int.from_bytes(blob[8:12], "little")
    mbytes = blob[12 : 12 + mlen]
    if len(mbytes) != mlen or zlib.crc32(mbytes) != mcrc:
        raise ValueError("checksum failure")
    manifest = json.loads(mbytes.decode("utf-8"))
    if manifest.get("format") != "SCK1":
        raise ValueError("version mismatch")
    spec = ModelSpec.from_dict(manifest["spec"])
    model = build_model(spec, seed=0)
    base = 12 + mlen
    by_name = {e["name"]: e for e in manifest["tensors"]}
    for key, target in [(k, model.params) for k in model.params] + [
        (f"buffer:{k}", model.buffers) for k in model.buffers
    ]:
        entry = by_name.pop(key, None)
        if entry is None:
            raise ValueError(f"missing tensor: {key}")
        plain = key.removeprefix("buffer:")
        if tuple(entry["shape"]) != target[plain].shape:
            raise ValueError(f"shape mismatch: {key}")
        raw = blob[base + entry["offset"] : base + entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or zlib.crc32(raw) != entry["crc32"]:
            raise ValueError("checksum failure")
        target[plain][...] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"])
    if by_name:
        raise ValueError(f"unexpected tensor: {sorted(by_name)[0]}")
    if bgru_as_lc is not None:
        model = convert_bgru_to_lc(model, *bgru_as_lc)
    return model, manifest["meta"]
