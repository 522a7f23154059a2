"""Audio feature extraction and augmentation.

Raw waveforms are turned into power spectrograms, then compressed either
with a static log (plus dataset mean/variance normalization) or with a
trainable per-channel energy normalization (PCEN) stage whose gain,
offset, root and smoother coefficients are learned per frequency bin.
Waveform-level augmentation (additive noise at a target SNR, synthetic
room impulse responses) lives here as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Floor added to power before taking logs; bounds the dynamic range of silence.
LOG_FLOOR = 1e-10
# Variance floor for static feature normalization.
NORM_EPS = 1e-8


@dataclass
class AudioUtterance:
    """Mono waveform with amplitudes in [-1, 1] and an optional transcript."""

    samples: np.ndarray
    sample_rate: int = 16000
    transcript: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be a 1-D sequence")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0 + 1e-9:
            raise ValueError("samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class SpectrogramConfig:
    """Framing parameters. Defaults give 161 bins at 16 kHz (20 ms window, 10 ms hop)."""

    n_bins: int = 161
    hop_ms: float = 10.0
    window_ms: float = 20.0

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.window_ms < self.hop_ms:
            raise ValueError("window_ms must be >= hop_ms")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    @classmethod
    def for_rate(cls, sample_rate: int, hop_ms: float = 10.0, window_ms: float = 20.0) -> "SpectrogramConfig":
        """Config whose bin count matches the window length at `sample_rate`."""
        win = int(round(window_ms * sample_rate / 1000.0))
        return cls(n_bins=win // 2 + 1, hop_ms=hop_ms, window_ms=window_ms)


@dataclass
class Spectrogram:
    """Time x frequency feature matrix.

    `values` holds per-cell power when `log_compressed` is False and
    log-domain (or otherwise compressed) features afterwards.
    """

    values: np.ndarray
    frame_hop_ms: float
    log_compressed: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("spectrogram must be a T x F matrix with T >= 1")
        if not self.log_compressed and np.any(self.values < 0):
            raise ValueError("power spectrogram must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def _frame(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = (samples.size - win) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[:: hop]
    return frames[:n]


def compute_power_spectrogram(audio: AudioUtterance, cfg: SpectrogramConfig) -> Spectrogram:
    """Hann-windowed magnitude-squared spectrogram; T = (len - window)//hop + 1 frames."""
    win = cfg.window_samples(audio.sample_rate)
    hop = cfg.hop_samples(audio.sample_rate)
    if cfg.n_bins != win // 2 + 1:
        raise ValueError(
            f"n_bins={cfg.n_bins} inconsistent with a {win}-sample window "
            f"(expected {win // 2 + 1}); use SpectrogramConfig.for_rate"
        )
    if audio.samples.size < win:
        raise ValueError("utterance too short")
    frames = _frame(audio.samples, win, hop) * np.hanning(win)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    return Spectrogram(power, frame_hop_ms=cfg.hop_ms, log_compressed=False)


def compute_log_spectrogram(audio: AudioUtterance, cfg: SpectrogramConfig) -> Spectrogram:
    """Log-compressed spectrogram, ln(power + 1e-10).

    The pre-log power matrix is available through
    :func:`compute_power_spectrogram` for the trainable-normalization path.
    """
    power = compute_power_spectrogram(audio, cfg)
    return Spectrogram(np.log(power.values + LOG_FLOOR), power.frame_hop_ms, log_compressed=True)


# ---------------------------------------------------------------------------
# Trainable per-channel energy normalization
# ---------------------------------------------------------------------------


@dataclass
class PcenParams:
    """Per-channel normalization parameters in unconstrained form.

    The constrained values are alpha = exp(log_alpha) (gain exponent),
    delta = exp(log_delta) (offset), r = exp(log_r) (root) and
    s = sigmoid(logit_s) (smoother coefficient), so gradient descent can
    never leave the valid region. `epsilon` is fixed, not trained.
    """

    log_alpha: np.ndarray
    log_delta: np.ndarray
    log_r: np.ndarray
    logit_s: np.ndarray
    epsilon: float = 1e-6

    def __post_init__(self):
        for name in ("log_alpha", "log_delta", "log_r", "logit_s"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        shapes = {getattr(self, n).shape for n in ("log_alpha", "log_delta", "log_r", "logit_s")}
        if len(shapes) != 1 or len(shapes.pop()) != 1:
            raise ValueError("parameter vectors must share one 1-D shape")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    @property
    def n_bins(self) -> int:
        return self.log_alpha.size

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha)

    @property
    def delta(self) -> np.ndarray:
        return np.exp(self.log_delta)

    @property
    def r(self) -> np.ndarray:
        return np.exp(self.log_r)

    @property
    def s(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logit_s))

    @classmethod
    def default(
        cls,
        n_bins: int,
        alpha: float = 0.98,
        delta: float = 2.0,
        r: float = 0.5,
        s: float = 0.025,
        epsilon: float = 1e-6,
    ) -> "PcenParams":
        ones = np.ones(n_bins)
        return cls(
            log_alpha=math.log(alpha) * ones,
            log_delta=math.log(delta) * ones,
            log_r=math.log(r) * ones,
            logit_s=math.log(s / (1.0 - s)) * ones,
            epsilon=epsilon,
        )


def pcen_smoother(power: np.ndarray, s) -> np.ndarray:
    """Causal first-order IIR energy estimate.

    M[0] = power[0]; M[t] = (1 - s) * M[t-1] + s * power[t], per channel.
    `s` may be a scalar or a per-channel vector in (0, 1).
    """
    x = power.values if isinstance(power, Spectrogram) else np.asarray(power, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0) or np.any(s >= 1.0):
        raise ValueError("invalid smoother")
    m = np.empty_like(x)
    m[0] = x[0]
    for t in range(1, x.shape[0]):
        m[t] = (1.0 - s) * m[t - 1] + s * x[t]
    return m


def pcen_compress(x: np.ndarray, m: np.ndarray, alpha, delta, r, epsilon) -> np.ndarray:
    """Gain-control-plus-root compression of power `x` given the energy estimate `m`.

    Computes (x / (epsilon + m)**alpha + delta)**r - delta**r cell-wise.
    Exposed separately so gain-invariance properties can be probed with
    settings (epsilon = 0, delta = 0) that the trained parameterization
    cannot reach.
    """
    gain = np.power(np.asarray(epsilon, dtype=np.float64) + m, -np.asarray(alpha, dtype=np.float64))
    return np.power(x * gain + delta, r) - np.power(delta, r)


@dataclass
class PcenCache:
    x: np.ndarray
    m: np.ndarray
    gain: np.ndarray
    u: np.ndarray
    params: PcenParams


def pcen_forward(power: Spectrogram, params: PcenParams) -> tuple[Spectrogram, PcenCache]:
    """Apply trainable per-channel energy normalization to a power spectrogram."""
    if power.log_compressed:
        raise ValueError("PCEN expects a pre-compression power spectrogram")
    x = power.values
    if x.shape[1] != params.n_bins:
        raise ValueError("channel count mismatch between spectrogram and parameters")
    alpha, delta, r, s = params.alpha, params.delta, params.r, params.s
    m = pcen_smoother(x, s)
    gain = np.power(params.epsilon + m, -alpha)
    u = x * gain + delta
    y = np.power(u, r) - np.power(delta, r)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("numeric overflow in PCEN")
    out = Spectrogram(y, power.frame_hop_ms, log_compressed=True)
    return out, PcenCache(x=x, m=m, gain=gain, u=u, params=params)


def pcen_backward(grad_out: np.ndarray, cache: PcenCache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Exact gradients of the normalization, including the reverse-time
    accumulation through the smoother recursion.

    Returns (grad wrt input power, grads wrt unconstrained parameters).
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.x.shape:
        raise ValueError("cache mismatch")
    p = cache.params
    x, m, gain, u = cache.x, cache.m, cache.gain, cache.u
    alpha, delta, r, s = p.alpha, p.delta, p.r, p.s
    T = x.shape[0]

    u_pow_rm1 = np.power(u, r - 1.0)
    du = grad_out * r * u_pow_rm1
    # delta enters both u and the -delta**r tail.
    d_delta = np.sum(grad_out * r * (u_pow_rm1 - np.power(delta, r - 1.0)), axis=0)
    d_r = np.sum(grad_out * (np.power(u, r) * np.log(u) - np.power(delta, r) * np.log(delta)), axis=0)
    d_alpha = np.sum(-du * x * gain * np.log(p.epsilon + m), axis=0)

    # Direct sensitivity of each cell to its own M, then push backwards in time.
    dm_direct = -du * x * alpha * np.power(p.epsilon + m, -alpha - 1.0)
    dm = np.empty_like(dm_direct)
    dm[T - 1] = dm_direct[T - 1]
    for t in range(T - 2, -1, -1):
        dm[t] = dm_direct[t] + (1.0 - s) * dm[t + 1]

    grad_x = du * gain
    if T > 1:
        grad_x[1:] += s * dm[1:]
        d_s = np.sum(dm[1:] * (x[1:] - m[:-1]), axis=0)
    else:
        d_s = np.zeros_like(s)
    grad_x[0] += dm[0]  # M[0] = x[0]

    grads = {
        "log_alpha": d_alpha * alpha,
        "log_delta": d_delta * delta,
        "log_r": d_r * r,
        "logit_s": d_s * s * (1.0 - s),
    }
    return grad_x, grads


# ---------------------------------------------------------------------------
# Static normalization
# ---------------------------------------------------------------------------


@dataclass
class FeatureStats:
    """Per-bin mean and variance over a dataset."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if np.any(self.var < 0):
            raise ValueError("variance must be >= 0")

    @classmethod
    def from_spectrograms(cls, specs) -> "FeatureStats":
        stacked = np.concatenate([s.values for s in specs], axis=0)
        return cls(mean=stacked.mean(axis=0), var=stacked.var(axis=0))


def feature_normalize(spec: Spectrogram, stats: FeatureStats) -> Spectrogram:
    """Shift/scale each bin to roughly zero mean, unit variance under `stats`."""
    values = (spec.values - stats.mean) / np.sqrt(stats.var + NORM_EPS)
    return Spectrogram(values, spec.frame_hop_ms, log_compressed=True)


# ---------------------------------------------------------------------------
# Waveform augmentation
# ---------------------------------------------------------------------------


def augment_noise(audio: AudioUtterance, noise: AudioUtterance, snr_db: float) -> AudioUtterance:
    """Mix `noise` into `audio` scaled so the result has the requested SNR.

    `snr_db = math.inf` is the no-op sentinel. Noise is tiled or truncated
    to the utterance length. If the mix would leave [-1, 1] both terms are
    rescaled by the peak, which preserves the SNR.
    """
    if snr_db == math.inf:
        return AudioUtterance(audio.samples.copy(), audio.sample_rate, audio.transcript)
    if noise.sample_rate != audio.sample_rate:
        raise ValueError("sample rate mismatch")
    n = audio.samples.size
    reps = int(np.ceil(n / max(noise.samples.size, 1)))
    tiled = np.tile(noise.samples, reps)[:n]
    p_sig = float(np.mean(audio.samples**2))
    p_noise = float(np.mean(tiled**2))
    if p_sig == 0.0 or p_noise == 0.0:
        raise ValueError("undefined SNR")
    g = math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = audio.samples + g * tiled
    peak = np.max(np.abs(mixed))
    if peak > 1.0:
        mixed = mixed / peak
    return AudioUtterance(mixed, audio.sample_rate, audio.transcript)


@dataclass
class ImpulseResponse:
    """Finite impulse response used to simulate room reverberation."""

    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim != 1 or not np.any(self.taps != 0.0):
            raise ValueError("impulse response needs at least one nonzero tap")


def synth_rir(seed: int, duration_ms: float, decay_rate: float, sample_rate: int = 16000) -> ImpulseResponse:
    """Deterministic synthetic room impulse response.

    Exponentially decaying noise taps, tap_k = exp(-decay_rate * k) * n_k,
    with the first tap forced to 1 so the direct path is preserved.
    """
    if duration_ms <= 0:
        raise ValueError("duration_ms must be positive")
    n = max(1, int(round(duration_ms * sample_rate / 1000.0)))
    rng = np.random.default_rng(seed)
    taps = np.exp(-decay_rate * np.arange(n)) * rng.standard_normal(n)
    taps[0] = 1.0
    return ImpulseResponse(taps, sample_rate)


def augment_rir(audio: AudioUtterance, rir: ImpulseResponse) -> AudioUtterance:
    """Convolve with an impulse response, truncate to the input length and
    rescale to the input's peak amplitude."""
    if rir.sample_rate != audio.sample_rate:
        raise ValueError("sample rate mismatch")
    out = np.convolve(audio.samples, rir.taps)[: audio.samples.size]
    peak_in = np.max(np.abs(audio.samples)) if audio.samples.size else 0.0
    peak_out = np.max(np.abs(out)) if out.size else 0.0
    if peak_in > 0 and peak_out > 0:
        out = out * (peak_in / peak_out)
    return AudioUtterance(out, audio.sample_rate, audio.transcript)
