import math

import numpy as np
import pytest

from streamasr.frontend import (
    LOG_FLOOR,
    AudioUtterance,
    FeatureStats,
    PcenParams,
    SpectrogramConfig,
    augment_noise,
    augment_rir,
    compute_log_spectrogram,
    compute_power_spectrogram,
    feature_normalize,
    pcen_backward,
    pcen_compress,
    pcen_forward,
    pcen_smoother,
    synth_rir,
)


def dft_power_oracle(frame: np.ndarray) -> np.ndarray:
    """Direct discrete-Fourier-sum power for one windowed frame."""
    n = frame.size
    bins = n // 2 + 1
    out = np.empty(bins)
    for k in range(bins):
        acc = 0.0 + 0.0j
        for t in range(n):
            acc += frame[t] * np.exp(-2j * np.pi * k * t / n)
        out[k] = abs(acc) ** 2
    return out


def central_diff(f, theta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = eps * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


class TestSpectrogram:
    def test_silence_hits_log_floor(self):
        audio = AudioUtterance(np.zeros(16000), 16000)
        spec = compute_log_spectrogram(audio, SpectrogramConfig())
        np.testing.assert_allclose(spec.values, math.log(LOG_FLOOR))

    def test_frame_count_one_second(self):
        audio = AudioUtterance(np.zeros(16000), 16000)
        spec = compute_log_spectrogram(audio, SpectrogramConfig())
        assert spec.n_frames == 99  # (16000 - 320) / 160 + 1
        assert spec.n_bins == 161

    def test_too_short_raises(self):
        audio = AudioUtterance(np.zeros(100), 16000)
        with pytest.raises(ValueError, match="utterance too short"):
            compute_power_spectrogram(audio, SpectrogramConfig())

    def test_sinusoid_peaks_at_its_bin(self):
        # 50 Hz bin spacing at 16 kHz with a 320-sample window.
        fs, k = 16000, 14
        t = np.arange(fs // 4) / fs
        audio = AudioUtterance(0.9 * np.sin(2 * np.pi * (k * 50.0) * t), fs)
        spec = compute_power_spectrogram(audio, SpectrogramConfig())
        assert np.all(np.argmax(spec.values, axis=1) == k)

    def test_one_frame_matches_dft_oracle(self):
        rng = np.random.default_rng(0)
        fs = 16000
        samples = rng.uniform(-0.5, 0.5, 320)
        audio = AudioUtterance(samples, fs)
        spec = compute_power_spectrogram(audio, SpectrogramConfig())
        expected = dft_power_oracle(samples * np.hanning(320))
        np.testing.assert_allclose(spec.values[0], expected, atol=1e-8)

    def test_inconsistent_bins_rejected(self):
        audio = AudioUtterance(np.zeros(8000), 4000)
        with pytest.raises(ValueError, match="n_bins"):
            compute_power_spectrogram(audio, SpectrogramConfig(n_bins=161))
        cfg = SpectrogramConfig.for_rate(4000)
        assert cfg.n_bins == 41
        compute_power_spectrogram(audio, cfg)


class TestSmoother:
    def test_constant_input_is_fixed_point(self):
        x = np.full((40, 5), 3.25)
        m = pcen_smoother(x, 0.3)
        np.testing.assert_allclose(m, 3.25)

    def test_impulse_decay(self):
        x = np.zeros((4, 1))
        x[0, 0] = 1.0
        m = pcen_smoother(x, 0.5)
        np.testing.assert_allclose(m[:, 0], [1.0, 0.5, 0.25, 0.125])

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 4, (30, 7))
        s = 0.08
        m = pcen_smoother(x, s)
        # independently coded scalar reference loop
        ref = np.zeros_like(x)
        for f in range(x.shape[1]):
            acc = x[0, f]
            ref[0, f] = acc
            for t in range(1, x.shape[0]):
                acc = (1 - s) * acc + s * x[t, f]
                ref[t, f] = acc
        np.testing.assert_allclose(m, ref, atol=1e-12)

    def test_causality(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, (20, 3))
        m = pcen_smoother(x, 0.1)
        x2 = x.copy()
        x2[12:] += 5.0
        m2 = pcen_smoother(x2, 0.1)
        np.testing.assert_array_equal(m[:12], m2[:12])

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
    def test_invalid_smoother(self, bad):
        with pytest.raises(ValueError, match="invalid smoother"):
            pcen_smoother(np.ones((3, 2)), bad)


def _power_spec(values, hop=10.0):
    from streamasr.frontend import Spectrogram

    return Spectrogram(np.asarray(values, dtype=np.float64), hop, log_compressed=False)


class TestPcenForward:
    def test_constant_input_closed_form(self):
        # x == M when the input is constant, so with alpha=1, eps=0, delta=1,
        # r=0.5 every cell is (1 + 1)**0.5 - 1.
        x = np.full((6, 4), 2.5)
        m = pcen_smoother(x, 0.1)
        y = pcen_compress(x, m, alpha=1.0, delta=1.0, r=0.5, epsilon=0.0)
        np.testing.assert_allclose(y, math.sqrt(2.0) - 1.0, atol=1e-12)

    def test_zero_input_gives_zero(self):
        spec = _power_spec(np.zeros((5, 3)))
        out, _ = pcen_forward(spec, PcenParams.default(3))
        np.testing.assert_allclose(out.values, 0.0, atol=1e-15)

    def test_gain_invariance_of_agc(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0.1, 2.0, (25, 6))
        s = 0.05
        m = pcen_smoother(x, s)
        base = pcen_compress(x, m, alpha=1.0, delta=0.0, r=0.5, epsilon=0.0)
        for c in (0.01, 7.0, 1000.0):
            mc = pcen_smoother(c * x, s)
            yc = pcen_compress(c * x, mc, alpha=1.0, delta=0.0, r=0.5, epsilon=0.0)
            np.testing.assert_allclose(yc, base, rtol=1e-10)

    def test_rejects_log_input(self):
        spec = compute_log_spectrogram(AudioUtterance(np.zeros(1000), 16000), SpectrogramConfig.for_rate(16000))
        with pytest.raises(ValueError):
            pcen_forward(spec, PcenParams.default(spec.n_bins))


class TestPcenBackward:
    def _setup(self, t=7, f=4, seed=4):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.01, 3.0, (t, f))
        params = PcenParams.default(f)
        params.log_alpha += rng.normal(0, 0.05, f)
        params.log_delta += rng.normal(0, 0.05, f)
        params.log_r += rng.normal(0, 0.05, f)
        params.logit_s += rng.normal(0, 0.2, f)
        w = rng.normal(size=(t, f))  # fixed projection makes the output scalar
        return x, params, w

    def test_zero_grad_out(self):
        x, params, _ = self._setup()
        _, cache = pcen_forward(_power_spec(x), params)
        gx, gp = pcen_backward(np.zeros_like(x), cache)
        np.testing.assert_array_equal(gx, 0.0)
        for g in gp.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_shape_mismatch(self):
        x, params, _ = self._setup()
        _, cache = pcen_forward(_power_spec(x), params)
        with pytest.raises(ValueError, match="cache mismatch"):
            pcen_backward(np.zeros((2, 2)), cache)

    def test_single_frame(self):
        x, params, w = self._setup(t=1)
        _, cache = pcen_forward(_power_spec(x), params)
        gx, _ = pcen_backward(w, cache)

        def f():
            out, _ = pcen_forward(_power_spec(x), params)
            return float(np.sum(out.values * w))

        fd = central_diff(f, x)
        np.testing.assert_allclose(gx, fd, rtol=1e-6, atol=1e-9)

    def test_all_gradients_match_finite_differences(self):
        x, params, w = self._setup()

        def f():
            out, _ = pcen_forward(_power_spec(x), params)
            return float(np.sum(out.values * w))

        _, cache = pcen_forward(_power_spec(x), params)
        gx, gp = pcen_backward(w, cache)

        fd_x = central_diff(f, x)
        np.testing.assert_allclose(gx, fd_x, rtol=1e-4, atol=1e-10)
        for name in ("log_alpha", "log_delta", "log_r", "logit_s"):
            fd = central_diff(f, getattr(params, name))
            np.testing.assert_allclose(gp[name], fd, rtol=1e-4, atol=1e-10, err_msg=name)


class TestFeatureNormalize:
    def test_self_stats_standardize(self):
        rng = np.random.default_rng(5)
        spec = _power_spec(rng.uniform(0.1, 5.0, (200, 8)))
        stats = FeatureStats.from_spectrograms([spec])
        out = feature_normalize(spec, stats)
        np.testing.assert_allclose(out.values.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.values.var(axis=0), 1.0, atol=1e-6)

    def test_zero_variance_bin(self):
        spec = _power_spec(np.full((10, 3), 2.0))
        stats = FeatureStats.from_spectrograms([spec])
        out = feature_normalize(spec, stats)
        np.testing.assert_allclose(out.values, 0.0)

    def test_not_idempotent_with_fixed_stats(self):
        rng = np.random.default_rng(6)
        spec = _power_spec(rng.uniform(0.1, 5.0, (50, 4)))
        stats = FeatureStats(mean=np.full(4, 0.5), var=np.full(4, 4.0))
        once = feature_normalize(spec, stats)
        twice = feature_normalize(once, stats)
        expected = (once.values - 0.5) / np.sqrt(4.0 + 1e-8)
        np.testing.assert_allclose(twice.values, expected)
        assert not np.allclose(twice.values, once.values)


class TestNoiseAugment:
    def _random_audio(self, seed, n=8000, scale=0.3):
        rng = np.random.default_rng(seed)
        return AudioUtterance(rng.uniform(-scale, scale, n), 16000)

    def test_infinite_snr_identity(self):
        a = self._random_audio(7)
        out = augment_noise(a, self._random_audio(8), math.inf)
        np.testing.assert_array_equal(out.samples, a.samples)

    def test_zero_db_equal_power_gain_one(self):
        a = self._random_audio(9, scale=0.2)
        noise = AudioUtterance(a.samples[::-1].copy(), 16000)  # same power
        out = augment_noise(a, noise, 0.0)
        np.testing.assert_allclose(out.samples, a.samples + noise.samples, atol=1e-12)

    def test_measured_snr(self):
        a = self._random_audio(10, scale=0.25)
        noise = self._random_audio(11, scale=0.1)
        out = augment_noise(a, noise, 10.0)
        added = out.samples - a.samples
        # rescale-by-peak preserves the ratio, but none should occur here
        snr = 10.0 * math.log10(np.mean(a.samples**2) / np.mean(added**2))
        assert abs(snr - 10.0) < 0.01

    def test_silent_audio_rejected(self):
        silent = AudioUtterance(np.zeros(1000), 16000)
        with pytest.raises(ValueError, match="undefined SNR"):
            augment_noise(silent, self._random_audio(12), 10.0)


class TestRir:
    def test_determinism(self):
        a = synth_rir(13, 100.0, 5e-3)
        b = synth_rir(13, 100.0, 5e-3)
        np.testing.assert_array_equal(a.taps, b.taps)

    def test_huge_decay_is_unit_impulse(self):
        rir = synth_rir(14, 50.0, 1e6)
        assert rir.taps[0] == 1.0
        np.testing.assert_allclose(rir.taps[1:], 0.0, atol=1e-300)

    def test_unit_impulse_identity(self):
        audio = AudioUtterance(np.random.default_rng(15).uniform(-0.5, 0.5, 2000), 16000)
        rir = synth_rir(0, 1.0, 1e9)  # decay so fast it is effectively a delta
        out = augment_rir(audio, rir)
        np.testing.assert_allclose(out.samples, audio.samples, atol=1e-12)

    def test_pure_delay(self):
        from streamasr.frontend import ImpulseResponse

        rng = np.random.default_rng(16)
        audio = AudioUtterance(rng.uniform(-0.5, 0.5, 500), 16000)
        d = 7
        taps = np.zeros(d + 1)
        taps[d] = 1.0
        out = augment_rir(audio, ImpulseResponse(taps, 16000))
        scale = np.max(np.abs(audio.samples)) / np.max(np.abs(audio.samples[: 500 - d]))
        np.testing.assert_allclose(out.samples[d:], audio.samples[: 500 - d] * scale, atol=1e-12)
        np.testing.assert_allclose(out.samples[:d], 0.0, atol=1e-15)

    def test_delta_audio_returns_rir(self):
        from streamasr.frontend import ImpulseResponse

        rir = synth_rir(17, 10.0, 0.01)
        peak = np.max(np.abs(rir.taps))
        delta = np.zeros(400)
        delta[0] = 1.0
        out = augment_rir(AudioUtterance(delta, 16000), rir)
        np.testing.assert_allclose(out.samples[: rir.taps.size], rir.taps / peak, atol=1e-12)

    def test_matches_naive_convolution(self):
        from streamasr.frontend import ImpulseResponse

        rng = np.random.default_rng(18)
        x = rng.uniform(-0.5, 0.5, 300)
        taps = rng.normal(size=40)
        taps[0] = 1.0
        audio = AudioUtterance(x, 16000)
        out = augment_rir(audio, ImpulseResponse(taps, 16000))
        # direct O(N*K) convolution
        ref = np.zeros(300)
        for i in range(300):
            for k in range(40):
                if 0 <= i - k < 300:
                    ref[i] += x[i - k] * taps[k]
        ref *= np.max(np.abs(x)) / np.max(np.abs(np.convolve(x, taps)[:300]))
        np.testing.assert_allclose(out.samples, ref, atol=1e-10)


class TestPcenVarianceReduction:
    def test_gain_sweep_variance_lower_than_log(self):
        # One utterance replayed at widely spread gains: the trainable
        # normalization should be far less sensitive than log compression.
        rng = np.random.default_rng(19)
        fs = 4000
        cfg = SpectrogramConfig.for_rate(fs)
        t = np.arange(fs) / fs
        base = 0.05 * np.sin(2 * np.pi * 400 * t) + 0.02 * rng.standard_normal(fs)
        base /= np.max(np.abs(base)) * 12.0
        params = PcenParams.default(cfg.n_bins)
        log_means, pcen_means = [], []
        for gain in (0.01, 0.1, 1.0, 10.0):
            audio = AudioUtterance(np.clip(base * gain, -1, 1), fs)
            power = compute_power_spectrogram(audio, cfg)
            log_means.append(np.log(power.values + LOG_FLOOR).mean(axis=0))
            out, _ = pcen_forward(power, params)
            pcen_means.append(out.values.mean(axis=0))
        log_var = np.stack(log_means).var(axis=0)
        pcen_var = np.stack(pcen_means).var(axis=0)
        assert np.all(pcen_var < log_var)
