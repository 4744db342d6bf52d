"""Waveforms, SI-SNR metrics, SNR-controlled mixing, resampling and WAV I/O."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Union

import numpy as np
from scipy.signal import resample_poly

EPS = 1e-8
SI_SNR_CAP = 30.0
CROSSFADE_SECONDS = 0.010


class DegenerateSignalError(ValueError):
    """Raised when a signal has no energy where energy is required."""


@dataclass(frozen=True)
class Waveform:
    """Finite-length mono signal.

    ``samples`` is stored as float64 and is never mutated by library code.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"mono waveform expected, got shape {x.shape}")
        if x.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


SignalLike = Union[Waveform, np.ndarray]


def _check_snr(value: float) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"SNR must be finite, got {value}")
    return value


def _samples(x: SignalLike) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def _check_pair(*signals: SignalLike) -> list[np.ndarray]:
    rates = {s.sample_rate for s in signals if isinstance(s, Waveform)}
    if len(rates) > 1:
        raise ValueError(f"sample rate mismatch: {sorted(rates)}")
    arrays = [_samples(s) for s in signals]
    lengths = {a.shape[-1] for a in arrays}
    if len(lengths) != 1:
        raise ValueError(f"length mismatch: {sorted(lengths)}")
    return arrays


def power(x: SignalLike) -> float:
    """Mean-square power over the full signal, silence included."""
    a = _samples(x)
    return float(np.mean(a * a))


def si_snr(estimate: SignalLike, reference: SignalLike) -> float:
    """Scale-invariant SNR in dB, saturated to ``[-SI_SNR_CAP, SI_SNR_CAP]``.

    Both signals are mean-removed, the estimate is projected onto the reference
    and the ratio of projected to residual energy is returned in decibels. The
    ``EPS`` floor is taken relative to the estimate energy so the value stays
    exactly invariant to rescaling either signal; a silent estimate scores
    ``-SI_SNR_CAP``.
    """
    est, ref = _check_pair(estimate, reference)
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= np.finfo(np.float64).tiny:
        raise DegenerateSignalError("reference has zero energy after mean removal")
    est_energy = float(np.dot(est, est))
    if est_energy == 0.0:
        return -SI_SNR_CAP
    target = (np.dot(est, ref) / ref_energy) * ref
    error = est - target
    ratio = np.dot(target, target) / (np.dot(error, error) + EPS * est_energy)
    with np.errstate(divide="ignore"):
        value = 10.0 * np.log10(ratio)
    return float(np.clip(value, -SI_SNR_CAP, SI_SNR_CAP))


def si_snr_improvement(
    estimate: SignalLike, reference: SignalLike, mixture: SignalLike
) -> float:
    _check_pair(estimate, reference, mixture)
    return si_snr(estimate, reference) - si_snr(mixture, reference)


def snr_db(foreground: SignalLike, background: SignalLike) -> float:
    """Plain power ratio in dB between two components."""
    p_bg = power(background)
    if p_bg <= 0.0:
        raise DegenerateSignalError("background has zero energy")
    return 10.0 * np.log10(power(foreground) / p_bg)


def snr_gain(foreground: SignalLike, background: SignalLike, target_db: float) -> float:
    """Gain for ``background`` so that ``snr_db(fg, gain * bg) == target_db``."""
    target_db = _check_snr(target_db)
    p_fg, p_bg = power(foreground), power(background)
    if p_fg <= 0.0 or p_bg <= 0.0:
        raise DegenerateSignalError("cannot mix signals with zero energy")
    return float(np.sqrt(p_fg / (p_bg * 10.0 ** (target_db / 10.0))))


def loop_to_length(x: np.ndarray, length: int, crossfade: int) -> np.ndarray:
    """Tile ``x`` up to ``length`` samples, blending each seam over ``crossfade`` samples."""
    if x.shape[0] >= length:
        return x[:length].copy()
    crossfade = min(crossfade, x.shape[0] // 2)
    if crossfade == 0:
        reps = -(-length // x.shape[0])
        return np.tile(x, reps)[:length]
    fade_in = np.linspace(0.0, 1.0, crossfade, endpoint=False)
    fade_out = 1.0 - fade_in
    out = x.copy()
    while out.shape[0] < length:
        seam = out[-crossfade:] * fade_out + x[:crossfade] * fade_in
        out = np.concatenate([out[:-crossfade], seam, x[crossfade:]])
    return out[:length]


def fit_background(
    background: np.ndarray,
    length: int,
    sample_rate: int,
    rng: np.random.Generator | None = None,
    offset: int | None = None,
) -> tuple[np.ndarray, int]:
    """Crop (at a random or given offset) or loop ``background`` to ``length``.

    Returns the adapted signal and the crop offset used (0 when looped).
    """
    n = background.shape[0]
    if n > length:
        if offset is None:
            rng = rng if rng is not None else np.random.default_rng()
            offset = int(rng.integers(0, n - length + 1))
        return background[offset : offset + length].copy(), int(offset)
    crossfade = int(round(CROSSFADE_SECONDS * sample_rate))
    return loop_to_length(background, length, crossfade), 0


def mix_at_snr(
    foreground: Waveform,
    background: Waveform,
    target: float,
    rng: np.random.Generator | None = None,
) -> tuple[Waveform, Waveform]:
    """Mix ``background`` under ``foreground`` at ``target`` dB SNR.

    The background is first cropped or looped to the foreground length; only
    the background is rescaled. Returns ``(mixture, scaled_background)``.
    """
    if foreground.sample_rate != background.sample_rate:
        raise ValueError("sample rate mismatch")
    if power(foreground) <= 0.0 or power(background) <= 0.0:
        raise DegenerateSignalError("cannot mix signals with zero energy")
    bg, _ = fit_background(background.samples, len(foreground), foreground.sample_rate, rng)
    gain = snr_gain(foreground.samples, bg, target)
    scaled = gain * bg
    rate = foreground.sample_rate
    return Waveform(foreground.samples + scaled, rate), Waveform(scaled, rate)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling; low-passes below the new Nyquist."""
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return w
    ratio = Fraction(target_rate, w.sample_rate)
    y = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(y, target_rate)


def read_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM WAV file; multi-channel input is averaged to mono."""
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        channels = f.getnchannels()
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return Waveform(data, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path: str | Path, w: Waveform | np.ndarray, sample_rate: int | None = None) -> None:
    """Write mono 16-bit PCM. Integer arrays are written verbatim."""
    if isinstance(w, Waveform):
        sample_rate, data = w.sample_rate, w.samples
    else:
        data = np.asarray(w)
        if sample_rate is None:
            raise ValueError("sample_rate required for raw arrays")
    pcm = data.astype("<i2") if np.issubdtype(data.dtype, np.integer) else to_pcm16(data)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(sample_rate))
        f.writeframes(pcm.tobytes())
