"""Synthesis, filtering, adaptive denoising and SNR instrumentation."""

import math

import numpy as np
import pytest

from neurotwin.errors import (
    DivergenceError,
    InvalidInputError,
    InvalidSpecError,
    ShapeError,
)
from neurotwin.signal_chain import (
    ChainConfig,
    EegSignal,
    FilterSpec,
    LmsState,
    SETTLE_S,
    SynthesisSpec,
    apply_filter,
    crop,
    denoise_chain,
    lms_denoise,
    read_signal_csv,
    snr_db,
    snr_gain_corpus,
    synthesize_eeg,
    write_signal_csv,
)

FS = 250.0


def sine(freq_hz, duration_s=8.0, fs=FS, amplitude=1.0, phase=0.0):
    t = np.arange(int(duration_s * fs)) / fs
    return EegSignal(amplitude * np.sin(2 * np.pi * freq_hz * t + phase), fs)


def steady_amplitude(signal, margin_s=1.0):
    m = int(margin_s * signal.sample_rate_hz)
    mid = signal.samples[m:-m]
    return math.sqrt(2.0 * float(np.mean(mid ** 2)))


class TestSynthesize:
    def test_no_contamination_equals_clean(self):
        spec = SynthesisSpec(noise_std=0.0, eog_amplitude=0.0,
                             powerline_amplitude=0.0, rng_seed=3)
        contaminated, _, clean = synthesize_eeg(spec)
        np.testing.assert_array_equal(contaminated.samples, clean.samples)

    def test_deterministic(self):
        spec = SynthesisSpec(rng_seed=11)
        a = synthesize_eeg(spec)
        b = synthesize_eeg(spec)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.samples, y.samples)

    def test_clean_fft_peak_at_rhythm(self):
        spec = SynthesisSpec(rhythm_components=((10.0, 10.0),), rng_seed=5)
        _, _, clean = synthesize_eeg(spec)
        spectrum = np.abs(np.fft.rfft(clean.samples))
        freqs = np.fft.rfftfreq(len(clean), d=1.0 / clean.sample_rate_hz)
        assert abs(freqs[int(np.argmax(spectrum))] - 10.0) < 0.2

    def test_invalid_duration_rejected(self):
        with pytest.raises(InvalidSpecError):
            SynthesisSpec(duration_s=0.0, rng_seed=0)
        with pytest.raises(InvalidSpecError):
            SynthesisSpec(sample_rate_hz=-5.0, rng_seed=0)


class TestFilters:
    def test_passband_tone_survives(self):
        out = apply_filter(sine(10.0), FilterSpec("bandpass"))
        amp = steady_amplitude(out)
        assert 0.7 <= amp <= 1.0 + 1e-3

    def test_notch_kills_center_tone(self):
        out = apply_filter(sine(50.0), FilterSpec("notch", center_hz=50.0))
        assert steady_amplitude(out) < 0.1

    def test_stopband_attenuation_over_20db(self):
        out = apply_filter(sine(100.0), FilterSpec("bandpass"))
        assert steady_amplitude(out) < 0.1  # > 20 dB down

    def test_zero_in_zero_out(self):
        zero = EegSignal(np.zeros(1000), FS)
        for spec in (FilterSpec("bandpass"), FilterSpec("notch")):
            np.testing.assert_array_equal(apply_filter(zero, spec).samples,
                                          np.zeros(1000))

    def test_linearity(self):
        rng = np.random.default_rng(17)
        spec = FilterSpec("bandpass")
        for _ in range(5):
            x = EegSignal(rng.normal(0, 10, 2000), FS)
            z = EegSignal(rng.normal(0, 10, 2000), FS)
            a, b = rng.uniform(-2, 2, 2)
            combined = apply_filter(EegSignal(a * x.samples + b * z.samples, FS), spec)
            separate = (a * apply_filter(x, spec).samples
                        + b * apply_filter(z, spec).samples)
            np.testing.assert_allclose(combined.samples, separate, atol=1e-9)

    def test_length_and_rate_preserved(self):
        sig = sine(10.0, duration_s=3.0)
        out = apply_filter(apply_filter(sig, FilterSpec("bandpass")),
                           FilterSpec("notch"))
        assert len(out) == len(sig)
        assert out.sample_rate_hz == sig.sample_rate_hz

    def test_cutoff_beyond_nyquist_rejected(self):
        with pytest.raises(InvalidSpecError):
            apply_filter(sine(10.0), FilterSpec("bandpass", high_hz=130.0))
        with pytest.raises(InvalidSpecError):
            apply_filter(sine(10.0), FilterSpec("notch", center_hz=125.0))


class TestLms:
    def test_zero_reference_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            y = EegSignal(rng.normal(0, 5, 500), FS)
            r = EegSignal(np.zeros(500), FS)
            out, state = lms_denoise(y, r, LmsState(coefficient=0.7))
            np.testing.assert_array_equal(out.samples, y.samples)
            assert state.coefficient == 0.7

    def test_converges_to_projection_coefficient(self):
        r = sine(7.0, duration_s=10000 / FS)
        y = EegSignal(0.8 * r.samples, FS)
        _, state = lms_denoise(y, r, LmsState(learning_rate=0.01))
        assert abs(state.coefficient - 0.8) < 0.05

    def test_single_step_hand_case(self):
        # e = 2 - 0*1 = 2; a1 = 0 + 0.5*2*1 = 1
        y = EegSignal(np.array([2.0, 0.0]), FS)
        r = EegSignal(np.array([1.0, 0.0]), FS)
        out, state = lms_denoise(y, r, LmsState(coefficient=0.0, learning_rate=0.5))
        assert out.samples[0] == 2.0
        assert state.coefficient == 1.0

    def test_error_magnitude_decreases(self):
        rng = np.random.default_rng(2)
        r = EegSignal(rng.normal(0, 1, 4000), FS)
        for mu in (0.001, 0.01, 0.1):
            y = EegSignal(1.5 * r.samples, FS)
            out, _ = lms_denoise(y, r, LmsState(learning_rate=mu))
            head = np.abs(out.samples[:400]).mean()
            tail = np.abs(out.samples[-400:]).mean()
            assert tail < head

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            lms_denoise(sine(5.0, duration_s=2.0), sine(5.0, duration_s=3.0))

    def test_divergence_names_step(self):
        n = 200
        y = EegSignal(np.full(n, 100.0), FS)
        r = EegSignal(np.full(n, 100.0), FS)
        with pytest.raises(DivergenceError) as excinfo:
            lms_denoise(y, r, LmsState(learning_rate=1.0))
        assert excinfo.value.step >= 0


class TestSnr:
    def test_identical_signals_give_infinite_result(self):
        clean = sine(10.0, duration_s=2.0)
        assert math.isinf(snr_db(clean, clean))

    def test_equal_residual_power_is_zero_db(self):
        clean = sine(10.0, duration_s=4.0)
        noisy = EegSignal(clean.samples + sine(30.0, duration_s=4.0).samples,
                          FS)
        assert abs(snr_db(clean, noisy)) < 0.05

    def test_zero_clean_power_rejected(self):
        zero = EegSignal(np.zeros(100), FS)
        with pytest.raises(InvalidInputError):
            snr_db(zero, sine(10.0, duration_s=100 / FS))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            snr_db(sine(10.0, duration_s=1.0), sine(10.0, duration_s=2.0))


class TestChain:
    def test_full_chain_improves_snr(self):
        trials = snr_gain_corpus(10, base_seed=40)
        assert all(t.gain_db >= 3.0 for t in trials)

    def test_chain_preserves_length_and_rate(self):
        spec = SynthesisSpec(rng_seed=8)
        contaminated, reference, _ = synthesize_eeg(spec)
        denoised, _ = denoise_chain(contaminated, reference)
        assert len(denoised) == len(contaminated)
        assert denoised.sample_rate_hz == contaminated.sample_rate_hz

    def test_chain_deterministic(self):
        spec = SynthesisSpec(rng_seed=21)
        outs = []
        for _ in range(2):
            contaminated, reference, _ = synthesize_eeg(spec)
            denoised, state = denoise_chain(contaminated, reference,
                                            ChainConfig())
            outs.append((denoised.samples, state.coefficient))
        np.testing.assert_array_equal(outs[0][0], outs[1][0])
        assert outs[0][1] == outs[1][1]

    def test_settle_crop_used_by_measurements(self):
        spec = SynthesisSpec(rng_seed=13)
        _, _, clean = synthesize_eeg(spec)
        skip = int(SETTLE_S * spec.sample_rate_hz)
        assert len(crop(clean, skip)) == len(clean) - skip


class TestSignalCsv:
    def test_round_trip(self, tmp_path):
        spec = SynthesisSpec(rng_seed=30, duration_s=2.0)
        contaminated, _, _ = synthesize_eeg(spec)
        path = tmp_path / "sig.csv"
        write_signal_csv(str(path), contaminated)
        back = read_signal_csv(str(path))
        np.testing.assert_array_equal(back.samples, contaminated.samples)
        assert back.sample_rate_hz == contaminated.sample_rate_hz

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,volts\n0,1\n")
        with pytest.raises(InvalidInputError):
            read_signal_csv(str(path))
