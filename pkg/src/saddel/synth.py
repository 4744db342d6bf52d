"""Manifest-driven mixture synthesis and the synthetic toy corpus."""

from __future__ import annotations

import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import butter, sosfilt

from .audio import Waveform, fit_background, read_wav, resample, snr_gain, to_pcm16, write_wav

SAMPLE_RATE = 8000
SPEECH_SNR_RANGE = (-2.5, 2.5)
NOISE_SNR_RANGE = (-5.0, 20.0)
PEAK_LIMIT = 0.9
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class TaskConfig:
    tag: str
    num_speakers: int
    with_noise: bool
    speech_snr_range: tuple[float, float] = SPEECH_SNR_RANGE
    noise_snr_range: tuple[float, float] | None = NOISE_SNR_RANGE

    def __post_init__(self):
        if not 1 <= self.num_speakers <= 3:
            raise ValueError(f"num_speakers must be in 1..3, got {self.num_speakers}")
        expected = f"{self.num_speakers}sp" + ("+n" if self.with_noise else "")
        if self.tag != expected:
            raise ValueError(f"tag {self.tag!r} inconsistent with {expected!r}")
        if self.num_speakers == 1 and not self.with_noise:
            raise ValueError("a single clean speaker is not a separation task")
        if self.with_noise and self.noise_snr_range is None:
            raise ValueError(f"{self.tag} needs a noise SNR range")
        object.__setattr__(self, "speech_snr_range", tuple(map(float, self.speech_snr_range)))
        if not self.with_noise:
            object.__setattr__(self, "noise_snr_range", None)
        elif self.noise_snr_range is not None:
            object.__setattr__(self, "noise_snr_range", tuple(map(float, self.noise_snr_range)))

    @classmethod
    def from_tag(cls, tag: str, **ranges) -> "TaskConfig":
        tag = tag.strip()
        if tag not in TASK_TAGS:
            raise ValueError(f"unknown task tag {tag!r}; expected one of {TASK_TAGS}")
        return cls(tag, int(tag[0]), tag.endswith("+n"), **ranges)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        d = dict(d)
        d["speech_snr_range"] = tuple(d["speech_snr_range"])
        if d.get("noise_snr_range") is not None:
            d["noise_snr_range"] = tuple(d["noise_snr_range"])
        return cls(**d)


TASK_TAGS = ("1sp+n", "2sp", "3sp", "2sp+n", "3sp+n")


@dataclass(frozen=True)
class PoolItem:
    path: str
    speaker: str | None = None


@dataclass
class MixtureSample:
    mixture: Waveform
    sources: list[Waveform]
    noise: Waveform | None
    config: TaskConfig
    seed: int


@dataclass
class ManifestEntry:
    output_id: str
    config: TaskConfig
    source_paths: list[str]
    source_speakers: list[str | None]
    source_gains: list[float]
    noise_path: str | None
    noise_offset: int
    noise_gain: float
    length: int
    seed: int
    # draws recorded for conformance checks; replay only needs the gains
    speech_snrs_db: list[float] = field(default_factory=list)
    noise_snr_db: float | None = None
    files: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["config"] = self.config.to_dict()
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        d["config"] = TaskConfig.from_dict(d["config"])
        return cls(**d)


def scan_pool(root: str | Path) -> list[PoolItem]:
    """List WAV files under ``root``; the subdirectory name is the speaker label."""
    root = Path(root)
    items = []
    for p in sorted(root.rglob("*.wav")):
        rel = p.relative_to(root)
        speaker = rel.parts[0] if len(rel.parts) > 1 else None
        items.append(PoolItem(str(p), speaker))
    return items


def _as_items(pool: Iterable) -> list[PoolItem]:
    return [p if isinstance(p, PoolItem) else PoolItem(str(p)) for p in pool]


@lru_cache(maxsize=4096)
def _load_cached(path: str) -> np.ndarray:
    w = resample(read_wav(path), SAMPLE_RATE)
    out = w.samples
    out.setflags(write=False)
    return out


def load_audio(path: str | Path) -> np.ndarray:
    """Read a WAV file and resample it to the working rate (cached, read-only)."""
    return _load_cached(os.path.abspath(str(path)))


def _pick_sources(pool: list[PoolItem], n: int, rng: np.random.Generator) -> list[PoolItem]:
    labelled = all(p.speaker is not None for p in pool)
    if labelled:
        speakers = sorted({p.speaker for p in pool})
        if len(speakers) < n:
            raise ValueError(f"need {n} distinct speakers, pool has {len(speakers)}")
        chosen = rng.choice(len(speakers), size=n, replace=False)
        picks = []
        for k in chosen:
            utts = [p for p in pool if p.speaker == speakers[k]]
            picks.append(utts[int(rng.integers(len(utts)))])
        return picks
    if len(pool) < n:
        raise ValueError(f"need {n} speech files, pool has {len(pool)}")
    return [pool[int(i)] for i in rng.choice(len(pool), size=n, replace=False)]


def synthesize_sample(
    speech_pool: Sequence,
    noise_pool: Sequence,
    config: TaskConfig,
    seed: int,
    output_id: str = "sample",
) -> tuple[MixtureSample, ManifestEntry]:
    """Draw one mixture for ``config``; the same seed gives bit-identical output."""
    speech = _as_items(speech_pool)
    noise = _as_items(noise_pool)
    if config.with_noise and not noise:
        raise ValueError(f"{config.tag} requires a non-empty noise pool")
    rng = np.random.default_rng(seed)

    picks = _pick_sources(speech, config.num_speakers, rng)
    raw = [load_audio(p.path) for p in picks]
    length = min(len(x) for x in raw)
    raw = [x[:length] for x in raw]

    gains = [1.0]
    speech_snrs = []
    for x in raw[1:]:
        # SNR of the first source relative to this one
        snr = float(rng.uniform(*config.speech_snr_range))
        speech_snrs.append(snr)
        gains.append(snr_gain(raw[0], x, snr))
    speech_sum = sum(g * x for g, x in zip(gains, raw))

    noise_path, noise_offset, noise_gain, noise_snr = None, 0, 0.0, None
    if config.with_noise:
        item = noise[int(rng.integers(len(noise)))]
        noise_path = item.path
        bg, noise_offset = fit_background(load_audio(noise_path), length, SAMPLE_RATE, rng)
        noise_snr = float(rng.uniform(*config.noise_snr_range))
        noise_gain = snr_gain(speech_sum, bg, noise_snr)
        peak_parts = [speech_sum + noise_gain * bg, noise_gain * bg]
    else:
        peak_parts = [speech_sum]
    peak = max(float(np.max(np.abs(p))) for p in peak_parts + [g * x for g, x in zip(gains, raw)])
    scale = PEAK_LIMIT / peak if peak > 0 else 1.0

    entry = ManifestEntry(
        output_id=output_id,
        config=config,
        source_paths=[p.path for p in picks],
        source_speakers=[p.speaker for p in picks],
        source_gains=[g * scale for g in gains],
        noise_path=noise_path,
        noise_offset=int(noise_offset),
        noise_gain=noise_gain * scale,
        length=int(length),
        seed=int(seed),
        speech_snrs_db=speech_snrs,
        noise_snr_db=noise_snr,
    )
    return build_sample(entry), entry


def build_sample(entry: ManifestEntry, base_dir: str | Path | None = None) -> MixtureSample:
    """Replay a manifest entry from its recorded files, gains and offsets."""

    def resolve(p: str) -> str:
        return p if base_dir is None or os.path.isabs(p) else os.path.join(base_dir, p)

    n = entry.length
    sources = [
        g * load_audio(resolve(p))[:n] for p, g in zip(entry.source_paths, entry.source_gains)
    ]
    mixture = np.sum(sources, axis=0)
    noise = None
    if entry.noise_path is not None:
        bg, _ = fit_background(load_audio(resolve(entry.noise_path)), n, SAMPLE_RATE, offset=entry.noise_offset)
        noise = entry.noise_gain * bg
        mixture = mixture + noise
    return MixtureSample(
        mixture=Waveform(mixture, SAMPLE_RATE),
        sources=[Waveform(s, SAMPLE_RATE) for s in sources],
        noise=None if noise is None else Waveform(noise, SAMPLE_RATE),
        config=entry.config,
        seed=entry.seed,
    )


def derive_seed(master_seed: int, key: str) -> int:
    """Per-sample seed from ``(master_seed, key)``; independent of worker order."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(key.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def write_sample(sample: MixtureSample, out_dir: Path, output_id: str) -> dict:
    """Write component WAVs; the mixture is the integer sum of the quantized parts."""
    d = out_dir / "wav" / output_id
    d.mkdir(parents=True, exist_ok=True)
    parts = [to_pcm16(s.samples).astype(np.int32) for s in sample.sources]
    files = {"sources": []}
    for i, pcm in enumerate(parts, start=1):
        write_wav(d / f"s{i}.wav", pcm.astype("<i2"), SAMPLE_RATE)
        files["sources"].append(f"wav/{output_id}/s{i}.wav")
    if sample.noise is not None:
        pcm = to_pcm16(sample.noise.samples).astype(np.int32)
        parts.append(pcm)
        write_wav(d / "noise.wav", pcm.astype("<i2"), SAMPLE_RATE)
        files["noise"] = f"wav/{output_id}/noise.wav"
    mix = np.sum(parts, axis=0)
    if mix.max() > 32767 or mix.min() < -32768:
        raise ValueError(f"{output_id}: quantized mixture overflows 16 bits")
    write_wav(d / "mix.wav", mix.astype("<i2"), SAMPLE_RATE)
    files["mixture"] = f"wav/{output_id}/mix.wav"
    return files


def _relative(entry: ManifestEntry, base: Path) -> ManifestEntry:
    entry.source_paths = [os.path.relpath(p, base) for p in entry.source_paths]
    if entry.noise_path is not None:
        entry.noise_path = os.path.relpath(entry.noise_path, base)
    return entry


def _make_one(args) -> str:
    speech, noise, config, seed, output_id, out_dir = args
    sample, entry = synthesize_sample(speech, noise, config, seed, output_id)
    entry.files = write_sample(sample, out_dir, output_id)
    return _relative(entry, out_dir).to_json()


def parse_config_counts(text: str, **ranges) -> list[tuple[TaskConfig, int]]:
    """Parse ``"2sp+n:1000,1sp+n:500"``."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        tag, _, count = part.partition(":")
        out.append((TaskConfig.from_tag(tag, **ranges), int(count or 0)))
    return out


def generate_corpus(
    speech_pool: Sequence,
    noise_pool: Sequence,
    configs: Sequence[tuple[TaskConfig, int]],
    out_dir: str | Path,
    master_seed: int,
    workers: int = 1,
) -> Path:
    """Synthesize and write every requested sample plus ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"{out_dir} is not writable")
    speech = [PoolItem(os.path.abspath(p.path), p.speaker) for p in _as_items(speech_pool)]
    noise = [PoolItem(os.path.abspath(p.path), p.speaker) for p in _as_items(noise_pool)]
    jobs = []
    for config, count in configs:
        if count < 0:
            raise ValueError(f"negative count for {config.tag}")
        for i in range(count):
            output_id = f"{config.tag}_{i:06d}"
            jobs.append((speech, noise, config, derive_seed(master_seed, output_id), output_id, out_dir))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            lines = list(ex.map(_make_one, jobs, chunksize=8))
    else:
        lines = [_make_one(j) for j in jobs]
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    lines = Path(path).read_text().splitlines()
    return [ManifestEntry.from_json(line) for line in lines if line.strip()]


def render_manifest(manifest: str | Path, out_dir: str | Path) -> Path:
    """Regenerate every WAV of an existing manifest into ``out_dir``."""
    manifest = Path(manifest)
    base = manifest.parent
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for entry in read_manifest(manifest):
        sample = build_sample(entry, base)
        abs_entry = ManifestEntry.from_json(entry.to_json())
        abs_entry.source_paths = [os.path.normpath(os.path.join(base, p)) for p in entry.source_paths]
        if entry.noise_path is not None:
            abs_entry.noise_path = os.path.normpath(os.path.join(base, entry.noise_path))
        abs_entry.files = write_sample(sample, out_dir, entry.output_id)
        lines.append(_relative(abs_entry, out_dir).to_json())
    out = out_dir / MANIFEST_NAME
    out.write_text("".join(line + "\n" for line in lines))
    return out


def generate_paired_corpus(
    speech_pool: Sequence,
    noise_pool: Sequence,
    num_speakers: int,
    count: int,
    out_dir: str | Path,
    master_seed: int,
    noise_snr_range: tuple[float, float] = NOISE_SNR_RANGE,
) -> tuple[Path, Path]:
    """Write clean and noisy versions of the same mixtures (``clean/`` and ``noisy/``).

    The noisy item reuses the clean item's sources and gains and adds noise, so
    the two manifests pair up by ``output_id``.
    """
    out_dir = Path(out_dir)
    clean_cfg = TaskConfig.from_tag(f"{num_speakers}sp")
    noisy_cfg = TaskConfig.from_tag(f"{num_speakers}sp+n", noise_snr_range=noise_snr_range)
    noise = [PoolItem(os.path.abspath(p.path), p.speaker) for p in _as_items(noise_pool)]
    clean_manifest = generate_corpus(speech_pool, [], [(clean_cfg, count)], out_dir / "clean", master_seed)
    clean_dir = clean_manifest.parent
    (out_dir / "noisy").mkdir(parents=True, exist_ok=True)
    lines = []
    for entry in read_manifest(clean_manifest):
        rng = np.random.default_rng(derive_seed(master_seed, "noise/" + entry.output_id))
        sample = build_sample(entry, clean_dir)
        speech_sum = sample.mixture.samples
        item = noise[int(rng.integers(len(noise)))]
        bg, offset = fit_background(load_audio(item.path), entry.length, SAMPLE_RATE, rng)
        snr = float(rng.uniform(*noise_snr_range))
        gain = snr_gain(speech_sum, bg, snr)
        peak = float(np.max(np.abs(speech_sum + gain * bg)))
        # keep the speech gains identical to the clean item unless the noisy mix would clip
        scale = min(1.0, PEAK_LIMIT / peak)
        noisy = ManifestEntry(
            output_id=entry.output_id,
            config=noisy_cfg,
            source_paths=[os.path.normpath(os.path.join(clean_dir, p)) for p in entry.source_paths],
            source_speakers=entry.source_speakers,
            source_gains=[g * scale for g in entry.source_gains],
            noise_path=item.path,
            noise_offset=int(offset),
            noise_gain=gain * scale,
            length=entry.length,
            seed=entry.seed,
            speech_snrs_db=entry.speech_snrs_db,
            noise_snr_db=snr,
        )
        noisy.files = write_sample(build_sample(noisy), out_dir / "noisy", entry.output_id)
        lines.append(_relative(noisy, out_dir / "noisy").to_json())
    noisy_manifest = out_dir / "noisy" / MANIFEST_NAME
    noisy_manifest.write_text("".join(line + "\n" for line in lines))
    return clean_manifest, noisy_manifest


# --- synthetic toy corpus ---------------------------------------------------

TOY_SECONDS = 4.0
TOY_NOISE_SECONDS = 5.0


def toy_fundamental(speaker: int) -> float:
    """Base pitch of toy speaker ``speaker`` in Hz (35 Hz apart)."""
    return 100.0 + 35.0 * speaker


def _toy_utterance(speaker: int, rng: np.random.Generator, spk_rng_seed: int) -> np.ndarray:
    sr = SAMPLE_RATE
    n = int(TOY_SECONDS * sr)
    t = np.arange(n) / sr
    f0 = toy_fundamental(speaker)
    # per-speaker timbre: two formant bumps, fixed for the speaker
    srng = np.random.default_rng(spk_rng_seed)
    formants = srng.uniform([300, 1000], [900, 2600])
    widths = srng.uniform([150, 300], [300, 600])

    # syllables: pitch offset and loudness per syllable, short pauses between
    env = np.zeros(n)
    pitch = np.full(n, f0)
    pos = int(rng.integers(0, int(0.2 * sr)))
    while pos < n:
        dur = int(rng.uniform(0.12, 0.35) * sr)
        seg = slice(pos, min(pos + dur, n))
        m = seg.stop - seg.start
        env[seg] = rng.uniform(0.4, 1.0) * np.sin(np.pi * np.arange(m) / max(m, 1)) ** 2
        pitch[seg] = f0 * (1.0 + rng.uniform(-0.02, 0.02))
        pos = seg.stop + int(rng.uniform(0.02, 0.12) * sr)
    vibrato = 1.0 + 0.005 * np.sin(2 * np.pi * rng.uniform(4, 6) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(pitch * vibrato) / sr

    x = np.zeros(n)
    for h in range(1, int(3800 // f0) + 1):
        fh = h * f0
        bump = sum(np.exp(-0.5 * ((fh - f) / w) ** 2) for f, w in zip(formants, widths))
        amp = 1.0 if h == 1 else 0.8 / h * (0.3 + 0.7 * min(bump, 1.0))
        x += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    x *= env
    return 0.3 * x / (np.max(np.abs(x)) + 1e-12)


def _toy_noise(kind: int, rng: np.random.Generator) -> np.ndarray:
    sr = SAMPLE_RATE
    n = int(TOY_NOISE_SECONDS * sr)
    t = np.arange(n) / sr
    if kind == 0:
        lo = rng.uniform(80, 1500)
        hi = min(lo * rng.uniform(2, 6), 3800)
        sos = butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
        x = sosfilt(sos, rng.standard_normal(n))
    elif kind == 1:
        x = np.zeros(n)
        for _ in range(int(rng.integers(1, 4))):
            x += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * rng.uniform(400, 3500) * t + rng.uniform(0, 2 * np.pi))
        gate = (np.sin(2 * np.pi * rng.uniform(0.5, 3) * t) > rng.uniform(-0.5, 0.5)).astype(float)
        x = x * (0.2 + 0.8 * gate)
    else:
        sos = butter(2, rng.uniform(300, 1200), btype="lowpass", fs=sr, output="sos")
        x = sosfilt(sos, rng.standard_normal(n)) + 0.3 * rng.standard_normal(n)
    return 0.3 * x / (np.max(np.abs(x)) + 1e-12)


def make_toy_corpus(
    out_dir: str | Path,
    n_speakers: int,
    utterances_per_speaker: int,
    seed: int,
    n_noise: int = 12,
) -> tuple[list[PoolItem], list[PoolItem]]:
    """Write a synthetic speech/noise corpus at 8 kHz and return both pools.

    Speech lives under ``speech/spkNN/uttNNN.wav`` (harmonic stacks with
    syllable-rate amplitude modulation, a distinct pitch per speaker); noise
    under ``noise/noiseNNN.wav`` (band-limited noise and gated tones).
    """
    if n_speakers < 1 or utterances_per_speaker < 1:
        raise ValueError("need at least one speaker and one utterance")
    out_dir = Path(out_dir)
    speech, noise = [], []
    for k in range(n_speakers):
        d = out_dir / "speech" / f"spk{k:02d}"
        d.mkdir(parents=True, exist_ok=True)
        spk_seed = derive_seed(seed, f"timbre/{k}")
        for u in range(utterances_per_speaker):
            rng = np.random.default_rng(derive_seed(seed, f"speech/{k}/{u}"))
            p = d / f"utt{u:03d}.wav"
            write_wav(p, Waveform(_toy_utterance(k, rng, spk_seed), SAMPLE_RATE))
            speech.append(PoolItem(str(p), f"spk{k:02d}"))
    d = out_dir / "noise"
    d.mkdir(parents=True, exist_ok=True)
    for j in range(n_noise):
        rng = np.random.default_rng(derive_seed(seed, f"noise/{j}"))
        p = d / f"noise{j:03d}.wav"
        write_wav(p, Waveform(_toy_noise(j % 3, rng), SAMPLE_RATE))
        noise.append(PoolItem(str(p)))
    return speech, noise
