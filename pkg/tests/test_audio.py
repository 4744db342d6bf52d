import io
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from saddel.audio import (
    SI_SNR_CAP,
    DegenerateSignalError,
    Waveform,
    fit_background,
    mix_at_snr,
    power,
    read_wav,
    resample,
    si_snr,
    si_snr_improvement,
    snr_db,
    write_wav,
)

from .oracles import si_snr_scalar

# frozen from oracles.si_snr_scalar before the implementation existed
GOLDEN_DC_OFFSET = 30.0
GOLDEN_SPIKE = 20.116639555962127

finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)


def signal(n=64):
    return arrays(np.float64, n, elements=finite).filter(lambda a: np.var(a) > 1e-3)


def test_waveform_invariants():
    with pytest.raises(ValueError):
        Waveform(np.array([]), 8000)
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 8000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 0)
    w = Waveform([0, 1, 2], 8000)
    assert w.samples.dtype == np.float64 and len(w) == 3


def test_si_snr_identity_and_scale_saturate():
    s = np.sin(np.linspace(0, 20, 400))
    assert si_snr(s, s) == SI_SNR_CAP
    assert si_snr(2.5 * s, s) == SI_SNR_CAP


def test_si_snr_golden_values():
    s = np.array([1.0, -1.0, 1.0, -1.0])
    assert si_snr(s + 0.1, s) == pytest.approx(GOLDEN_DC_OFFSET, abs=1e-9)
    assert si_snr(s + np.array([0.3, 0, 0, 0]), s) == pytest.approx(GOLDEN_SPIKE, abs=1e-9)


def test_si_snr_errors():
    with pytest.raises(ValueError):
        si_snr(np.ones(4), np.ones(5))
    with pytest.raises(DegenerateSignalError):
        si_snr(np.arange(4.0), np.full(4, 0.3))
    with pytest.raises(ValueError):
        si_snr(Waveform(np.ones(4), 8000), Waveform(np.arange(4.0), 16000))


@given(signal(), signal())
def test_si_snr_matches_scalar_oracle(x, s):
    assert si_snr(x, s) == pytest.approx(si_snr_scalar(x, s), abs=1e-6)


@given(signal(), signal(), st.floats(1e-4, 1e4))
def test_scale_invariance(x, s, a):
    base = si_snr(x, s)
    if abs(base) < SI_SNR_CAP:
        assert abs(si_snr(a * x, s) - base) < 1e-6
        assert abs(si_snr(x, a * s) - base) < 1e-6


def test_silent_estimate_scores_floor():
    assert si_snr(np.zeros(16), np.arange(16.0)) == -SI_SNR_CAP
    assert si_snr(np.full(16, 0.4), np.arange(16.0)) == -SI_SNR_CAP


@given(signal(), signal(), st.floats(-5, 5))
def test_dc_offset_invariance(x, s, c):
    assert abs(si_snr(x + c, s) - si_snr(x, s)) < 1e-6


@given(signal(), signal())
def test_si_snr_bounded(x, s):
    assert -SI_SNR_CAP <= si_snr(x, s) <= SI_SNR_CAP


def test_si_snri_definitional_values():
    rng = np.random.default_rng(3)
    s, n = rng.standard_normal(800), rng.standard_normal(800)
    m = s + n
    assert si_snr_improvement(m, s, m) == 0.0
    assert si_snr_improvement(s, s, m) == pytest.approx(SI_SNR_CAP - si_snr(m, s))


def test_si_snri_two_tone():
    t = np.arange(4000) / 8000
    s1 = np.sin(2 * np.pi * 220 * t)
    s2 = 0.8 * np.sin(2 * np.pi * 570 * t + 0.3)
    m = s1 + s2
    estimate = s1 + 0.05 * s2
    expected = si_snr_scalar(estimate, s1) - si_snr_scalar(m, s1)
    value = si_snr_improvement(estimate, s1, m)
    assert value > 0
    assert value == pytest.approx(expected, abs=1e-6)


def test_mix_equal_power_zero_db_keeps_gain():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(1000)
    b = rng.standard_normal(1000)
    b *= np.sqrt(power(a) / power(b))
    mix, scaled = mix_at_snr(Waveform(a, 8000), Waveform(b, 8000), 0.0)
    assert np.max(np.abs(scaled.samples - b)) < 1e-9
    np.testing.assert_array_equal(mix.samples, a + scaled.samples)


def test_mix_twenty_db():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(1000), rng.standard_normal(1000)
    _, scaled = mix_at_snr(Waveform(a, 8000), Waveform(b, 8000), 20.0)
    assert power(a) / power(scaled) == pytest.approx(100.0, rel=1e-9)


def test_mix_round_trip_minus_2_5():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal(1200), rng.standard_normal(3000)
    mix, scaled = mix_at_snr(Waveform(a, 8000), Waveform(b, 8000), -2.5, rng)
    assert abs(snr_db(a, scaled) - (-2.5)) < 1e-6
    assert len(mix) == 1200


@settings(max_examples=50)
@given(st.floats(-30, 30), st.integers(100, 3000), st.integers(0, 2**31))
def test_mix_round_trip_property(target, bg_len, seed):
    rng = np.random.default_rng(seed)
    fg = Waveform(rng.standard_normal(1000), 8000)
    bg = Waveform(rng.standard_normal(bg_len), 8000)
    mix, scaled = mix_at_snr(fg, bg, target, rng)
    assert abs(snr_db(fg, scaled) - target) < 1e-6
    np.testing.assert_array_equal(mix.samples, fg.samples + scaled.samples)


def test_mix_errors():
    z = Waveform(np.zeros(100), 8000)
    x = Waveform(np.ones(100), 8000)
    with pytest.raises(DegenerateSignalError):
        mix_at_snr(x, z, 0.0)
    with pytest.raises(ValueError):
        mix_at_snr(x, Waveform(np.ones(100), 16000), 0.0)


def test_background_loop_and_crop():
    bg = np.arange(100, dtype=float)
    looped, off = fit_background(bg, 350, 8000)
    assert looped.shape == (350,) and off == 0
    np.testing.assert_array_equal(looped[:20], bg[:20])
    cropped, off = fit_background(bg, 30, 8000, np.random.default_rng(0))
    np.testing.assert_array_equal(cropped, bg[off : off + 30])


def test_resample_identity():
    w = Waveform(np.random.default_rng(0).standard_normal(100), 8000)
    assert resample(w, 8000).samples is w.samples


def test_resample_tone_peak_preserved():
    t = np.arange(16000) / 16000
    out = resample(Waveform(np.sin(2 * np.pi * 1000 * t), 16000), 8000)
    assert out.sample_rate == 8000
    assert abs(out.duration - 1.0) <= 1 / 8000
    spectrum = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(len(out), 1 / 8000)
    bin_width = freqs[1]
    assert abs(freqs[np.argmax(spectrum)] - 1000) <= bin_width


def test_resample_filters_above_nyquist():
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 5000 * t)
    out = resample(Waveform(x, 16000), 8000)
    assert power(out) <= 0.01 * power(x)


def test_wav_round_trip(tmp_path):
    x = np.linspace(-0.5, 0.5, 101)
    write_wav(tmp_path / "a.wav", Waveform(x, 8000))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    assert np.max(np.abs(back.samples - x)) <= 0.5 / 32768 + 1e-12
    with wave.open(str(tmp_path / "a.wav")) as f:
        assert f.getsampwidth() == 2 and f.getnchannels() == 1


def test_read_stereo_averages(tmp_path):
    buf = tmp_path / "st.wav"
    frames = np.array([[1000, 3000], [-2000, 0]], dtype="<i2")
    with wave.open(str(buf), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(16000)
        f.writeframes(frames.tobytes())
    w = read_wav(buf)
    np.testing.assert_allclose(w.samples, [2000 / 32768, -1000 / 32768])
