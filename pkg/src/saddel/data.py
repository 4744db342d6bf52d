"""Batch sources for training: pre-mixed corpora and on-the-fly synthesis."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .audio import read_wav
from .synth import SAMPLE_RATE, ManifestEntry, TaskConfig, read_manifest, synthesize_sample


@dataclass
class Item:
    output_id: str
    mixture: np.ndarray
    sources: np.ndarray  # [N, T]
    noise: np.ndarray | None


@dataclass
class Batch:
    mixture: torch.Tensor  # [B, T]
    sources: torch.Tensor  # [B, N, T]
    noise: torch.Tensor | None  # [B, T]


class TaskData(Protocol):
    config: TaskConfig

    def sample_batch(self, rng: np.random.Generator, batch_size: int, segment: int) -> Batch: ...


def _crop(x: np.ndarray, start: int, segment: int) -> np.ndarray:
    out = x[..., start : start + segment]
    short = segment - out.shape[-1]
    if short > 0:
        out = np.concatenate([out, np.zeros(out.shape[:-1] + (short,), out.dtype)], axis=-1)
    return out


def collate(items: Sequence[Item], starts: Sequence[int], segment: int, dtype=torch.float32) -> Batch:
    mix = np.stack([_crop(it.mixture, s, segment) for it, s in zip(items, starts)])
    src = np.stack([_crop(it.sources, s, segment) for it, s in zip(items, starts)])
    noise = None
    if items[0].noise is not None:
        noise = torch.as_tensor(np.stack([_crop(it.noise, s, segment) for it, s in zip(items, starts)]), dtype=dtype)
    return Batch(torch.as_tensor(mix, dtype=dtype), torch.as_tensor(src, dtype=dtype), noise)


def load_item(entry: ManifestEntry, base: Path) -> Item:
    files = entry.files
    sources = np.stack([read_wav(base / p).samples for p in files["sources"]]).astype(np.float32)
    noise = read_wav(base / files["noise"]).samples.astype(np.float32) if "noise" in files else None
    mixture = read_wav(base / files["mixture"]).samples.astype(np.float32)
    return Item(entry.output_id, mixture, sources, noise)


class CorpusTask:
    """Items of one task configuration read from a written corpus."""

    def __init__(self, config: TaskConfig, items: list[Item]):
        if not items:
            raise ValueError(f"empty corpus for task {config.tag}")
        self.config = config
        self.items = items

    def sample_batch(self, rng: np.random.Generator, batch_size: int, segment: int) -> Batch:
        idx = rng.integers(0, len(self.items), size=batch_size)
        chosen = [self.items[i] for i in idx]
        starts = [int(rng.integers(0, max(1, it.mixture.shape[0] - segment + 1))) for it in chosen]
        return collate(chosen, starts, segment)

    def __len__(self) -> int:
        return len(self.items)


class OnTheFlyTask:
    """Fresh mixtures drawn from speech/noise pools for every batch."""

    def __init__(self, speech_pool, noise_pool, config: TaskConfig):
        self.config = config
        self.speech_pool = list(speech_pool)
        self.noise_pool = list(noise_pool)

    def sample_batch(self, rng: np.random.Generator, batch_size: int, segment: int) -> Batch:
        items, starts = [], []
        for _ in range(batch_size):
            sample, _ = synthesize_sample(self.speech_pool, self.noise_pool, self.config, int(rng.integers(2**32)))
            items.append(
                Item(
                    "",
                    sample.mixture.samples.astype(np.float32),
                    np.stack([s.samples for s in sample.sources]).astype(np.float32),
                    None if sample.noise is None else sample.noise.samples.astype(np.float32),
                )
            )
            starts.append(int(rng.integers(0, max(1, len(sample.mixture) - segment + 1))))
        return collate(items, starts, segment)


def load_corpus(manifests: Sequence[str | Path] | str | Path, tasks: Sequence[str] | None = None) -> dict[str, CorpusTask]:
    """Group the items of one or more manifests by task tag."""
    if isinstance(manifests, (str, Path)):
        manifests = [manifests]
    grouped: dict[str, tuple[TaskConfig, list[Item]]] = {}
    for m in manifests:
        m = Path(m)
        for entry in read_manifest(m):
            tag = entry.config.tag
            if tasks is not None and tag not in tasks:
                continue
            grouped.setdefault(tag, (entry.config, []))[1].append(load_item(entry, m.parent))
    return {tag: CorpusTask(cfg, items) for tag, (cfg, items) in grouped.items()}


def find_manifests(directory: str | Path) -> list[Path]:
    """A manifest file itself, ``directory/manifest.jsonl``, or every manifest below ``directory``."""
    path = Path(directory)
    if path.is_file():
        return [path]
    if (path / "manifest.jsonl").exists():
        return [path / "manifest.jsonl"]
    return sorted(path.rglob("manifest.jsonl"))


def seconds_to_samples(seconds: float) -> int:
    return int(round(seconds * SAMPLE_RATE))
