"""Central-difference verification of every analytic gradient in the
package, plus a fault-injection self-test of the checker itself."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers, losses
from .frontend import PcenParams, Spectrogram, pcen_backward, pcen_forward


@dataclass
class GradCase:
    """A scalar-valued function of named parameter arrays plus its claimed
    analytic gradients. `fn` must recompute from the (mutated) arrays."""

    name: str
    params: dict
    fn: object
    analytic: dict
    expect_fail: bool = False


@dataclass
class GradReport:
    component: str
    max_rel_err: float
    worst_param: str
    expect_fail: bool

    @property
    def passed(self) -> bool:
        ok = self.max_rel_err < 1e-4
        return (not ok) if self.expect_fail else ok


def central_difference(fn, theta: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(theta)
    flat, gf = theta.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = eps * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_case(case: GradCase, eps: float = 1e-5) -> GradReport:
    worst, worst_name = 0.0, ""
    for name, theta in case.params.items():
        fd = central_difference(case.fn, theta, eps)
        an = np.asarray(case.analytic[name], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1.0)
        err = float(np.max(np.abs(fd - an) / denom)) if an.size else 0.0
        if err > worst:
            worst, worst_name = err, name
    return GradReport(case.name, worst, worst_name, case.expect_fail)


# ---------------------------------------------------------------------------
# Component builders
# ---------------------------------------------------------------------------


def _proj(rng, shape):
    return rng.normal(size=shape)


def _build_linear(seed, corrupt=False):
    rng = np.random.default_rng(seed)
    x = 3.0 * rng.normal(size=(5, 4))
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    proj = _proj(rng, (5, 3))

    def fn():
        return float(np.sum((x @ w.T + b) * proj))

    _, cache = layers.linear_forward(x, w, b)
    gx, gw, gb = layers.linear_backward(proj, cache)
    if corrupt:
        gw = gw * 1.01  # injected 1% fault; the checker must flag it
    return GradCase("linear", {"x": x, "w": w, "b": b}, fn, {"x": gx, "w": gw, "b": gb}, expect_fail=corrupt)


def _build_softmax(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 6))
    proj = _proj(rng, (4, 6))

    def fn():
        return float(np.sum(layers.softmax(x) * proj))

    gx = layers.softmax_backward(proj, layers.softmax(x))
    return GradCase("softmax", {"x": x}, fn, {"x": gx})


def _build_pcen(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.01, 3.0, (6, 4))
    params = PcenParams.default(4)
    for arr in (params.log_alpha, params.log_delta, params.log_r, params.logit_s):
        arr += rng.normal(0, 0.1, arr.shape)
    proj = _proj(rng, x.shape)

    def fn():
        out, _ = pcen_forward(Spectrogram(x, 10.0), params)
        return float(np.sum(out.values * proj))

    _, cache = pcen_forward(Spectrogram(x, 10.0), params)
    gx, gp = pcen_backward(proj, cache)
    theta = {
        "x": x,
        "log_alpha": params.log_alpha,
        "log_delta": params.log_delta,
        "log_r": params.log_r,
        "logit_s": params.logit_s,
    }
    return GradCase("pcen", theta, fn, {"x": gx, **gp})


def _build_conv2d(seed):
    rng = np.random.default_rng(seed)
    spec = layers.Conv2dSpec(2, (3, 2), 2, (2, 2))
    x = rng.normal(size=(6, 5, 2))
    w = rng.normal(size=(2, 2, 3, 2))
    b = rng.normal(size=2)
    proj = _proj(rng, (3, 3, 2))

    def fn():
        y, _ = layers.conv2d_forward(x, spec, w, b)
        return float(np.sum(y * proj))

    _, cache = layers.conv2d_forward(x, spec, w, b)
    gx, gw, gb = layers.conv2d_backward(proj, cache)
    return GradCase("conv2d", {"x": x, "w": w, "b": b}, fn, {"x": gx, "w": gw, "b": gb})


def _build_batchnorm(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 3))
    gamma = rng.normal(1.0, 0.2, 3)
    beta = rng.normal(size=3)
    proj = _proj(rng, (8, 3))

    def make_stats():
        return layers.BatchNormStats(gamma, beta, np.zeros(3), np.ones(3))

    def fn():
        y, _ = layers.batchnorm_forward(x, make_stats(), "train")
        return float(np.sum(y * proj))

    _, cache = layers.batchnorm_forward(x, make_stats(), "train")
    gx, ggamma, gbeta = layers.batchnorm_backward(proj, cache)
    return GradCase("batchnorm", {"x": x, "gamma": gamma, "beta": beta}, fn, {"x": gx, "gamma": ggamma, "beta": gbeta})


def _build_gru(seed):
    rng = np.random.default_rng(seed)
    params = layers.GruParams.init(3, 4, rng)
    x = rng.normal(size=(5, 3))
    proj = _proj(rng, (5, 4))

    def fn():
        out, _ = layers.gru_layer(x, params)
        return float(np.sum(out * proj))

    _, cache = layers.gru_layer(x, params)
    gx, grads, _ = layers.gru_layer_backward(proj, cache)
    theta = {"x": x, "w": params.w, "u": params.u, "b": params.b}
    return GradCase("gru", theta, fn, {"x": gx, **grads})


def _build_bgru(seed):
    rng = np.random.default_rng(seed)
    pf = layers.GruParams.init(3, 3, rng)
    pb = layers.GruParams.init(3, 3, rng)
    x = rng.normal(size=(5, 3))
    proj = _proj(rng, (5, 6))

    def fn():
        y, _ = layers.bgru(x, pf, pb)
        return float(np.sum(y * proj))

    _, cache = layers.bgru(x, pf, pb)
    gx, grads = layers.bgru_backward(proj, cache)
    theta = {"x": x, "fwd.w": pf.w, "fwd.u": pf.u, "bwd.w": pb.w, "bwd.u": pb.u}
    analytic = {
        "x": gx,
        "fwd.w": grads["fwd"]["w"],
        "fwd.u": grads["fwd"]["u"],
        "bwd.w": grads["bwd"]["w"],
        "bwd.u": grads["bwd"]["u"],
    }
    return GradCase("bgru", theta, fn, analytic)


def _build_lc_bgru(seed):
    rng = np.random.default_rng(seed)
    params = layers.LcBgruParams.init(3, 3, rng)
    cfg = layers.LcBgruConfig(4, 2)
    x = rng.normal(size=(7, 3))
    proj = _proj(rng, (7, 6))

    def fn():
        y, _ = layers.lc_bgru(x, params, cfg)
        return float(np.sum(y * proj))

    _, cache = layers.lc_bgru(x, params, cfg)
    gx, grads = layers.lc_bgru_backward(proj, cache)
    theta = {"x": x, "w": params.w, "b": params.b, "u_fwd": params.u_fwd, "u_bwd": params.u_bwd}
    return GradCase("lc_bgru", theta, fn, {"x": gx, **grads})


def _build_la_conv(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(3, 3))
    proj = _proj(rng, (6, 3))

    def fn():
        y, _ = layers.la_conv_forward(x, w)
        return float(np.sum(y * proj))

    _, cache = layers.la_conv_forward(x, w)
    gx, gw = layers.la_conv_backward(proj, cache)
    return GradCase("la_conv", {"x": x, "w": w}, fn, {"x": gx, "w": gw})


def _build_ctc(seed):
    rng = np.random.default_rng(seed)
    lp = rng.normal(size=(6, 4))
    label = [1, 3, 2]

    def fn():
        return losses.ctc_loss(lp, label)[0]

    _, grad = losses.ctc_loss(lp, label)
    return GradCase("ctc", {"log_probs": lp}, fn, {"log_probs": grad})


def _build_gramctc(seed):
    rng = np.random.default_rng(seed)
    grams = losses.GramSet(["a", "b", "ab", "ba"])
    text = "ab"
    lattice = losses.build_gram_lattice(text, grams)
    lp = rng.normal(size=(5, 5))

    def fn():
        return losses.gramctc_loss(lp, text, lattice)[0]

    _, grad = losses.gramctc_loss(lp, text, lattice)
    return GradCase("gramctc", {"log_probs": lp}, fn, {"log_probs": grad})


def _build_ce(seed):
    rng = np.random.default_rng(seed)
    lp = rng.normal(size=(6, 4))
    align = losses.Alignment(rng.integers(0, 4, 6))

    def fn():
        return losses.ce_alignment_loss(lp, align)[0]

    _, grad = losses.ce_alignment_loss(lp, align)
    return GradCase("ce", {"log_probs": lp}, fn, {"log_probs": grad})


BUILDERS = {
    "linear": _build_linear,
    "softmax": _build_softmax,
    "pcen": _build_pcen,
    "conv2d": _build_conv2d,
    "batchnorm": _build_batchnorm,
    "gru": _build_gru,
    "bgru": _build_bgru,
    "lc_bgru": _build_lc_bgru,
    "la_conv": _build_la_conv,
    "ctc": _build_ctc,
    "gramctc": _build_gramctc,
    "ce": _build_ce,
}


def grad_check(component: str, seed: int = 0, eps: float = 1e-5) -> GradReport:
    """Check one registered component; see `BUILDERS` for names.

    The special name "selftest" verifies the checker itself by injecting a
    1% fault into a known-good gradient and confirming it is reported.
    """
    if component == "selftest":
        report = check_case(_build_linear(seed, corrupt=True), eps)
        return GradReport("selftest", report.max_rel_err, report.worst_param, expect_fail=True)
    if component not in BUILDERS:
        raise KeyError(f"unknown component {component!r}")
    return check_case(BUILDERS[component](seed), eps)


def grad_check_all(seed: int = 0, eps: float = 1e-5) -> list[GradReport]:
    reports = [grad_check(name, seed, eps) for name in BUILDERS]
    reports.append(grad_check("selftest", seed, eps))
    return reports
