"""Desk-scale toy experiments: data preparation, training and evaluation in one place.

Used by the scripts in ``scripts/`` and by the acceptance suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .audio import Waveform
from .data import load_corpus, load_item
from .evaluate import A2PITSystem, EvalReport, RecursiveSystem, degradation_analysis, evaluate
from .model import SeparatorConfig
from .recursive import StopRule, separate_recursive
from .synth import (
    SAMPLE_RATE,
    TASK_TAGS,
    PoolItem,
    TaskConfig,
    generate_corpus,
    generate_paired_corpus,
    make_toy_corpus,
    read_manifest,
)
from .train import STRATEGY_TASKS, TRAINERS, TrainConfig, TrainResult, ValidationSet, build_model, train_cascade

log = logging.getLogger(__name__)


@dataclass
class ToySetup:
    """Sizes for a toy run. Test items use utterances and noises never seen in training."""

    speakers: int = 8
    utterances: int = 20
    noises: int = 12
    holdout_utterances: int = 5
    holdout_noises: int = 3
    train_per_task: int = 150
    val_per_task: int = 16
    test_per_task: int = 50
    paired_per_count: int = 50
    seed: int = 1


@dataclass
class ToyData:
    root: Path
    train: Path
    val: Path
    test: Path
    paired: dict[int, tuple[Path, Path]] = field(default_factory=dict)


def _utterance_index(item: PoolItem) -> int:
    return int("".join(ch for ch in Path(item.path).stem if ch.isdigit()) or 0)


def split_pool(items: Sequence[PoolItem], holdout: int) -> tuple[list[PoolItem], list[PoolItem]]:
    """Per speaker, the last ``holdout`` utterances (by file index) go to the test side."""
    by_speaker: dict[str | None, list[PoolItem]] = {}
    for it in items:
        by_speaker.setdefault(it.speaker, []).append(it)
    train, test = [], []
    for group in by_speaker.values():
        group = sorted(group, key=_utterance_index)
        cut = len(group) - holdout
        train += group[:cut]
        test += group[cut:]
    return train, test


def prepare_toy_data(root: str | Path, setup: ToySetup = ToySetup(), paired_counts: Sequence[int] = (2, 3)) -> ToyData:
    root = Path(root)
    speech, noise = make_toy_corpus(root / "pools", setup.speakers, setup.utterances, setup.seed, setup.noises)
    sp_train, sp_test = split_pool(speech, setup.holdout_utterances)
    nz_train, nz_test = split_pool(noise, setup.holdout_noises)

    def corpus(name, count, speech_pool, noise_pool, offset):
        configs = [(TaskConfig.from_tag(t), count) for t in TASK_TAGS]
        return generate_corpus(speech_pool, noise_pool, configs, root / name, setup.seed * 1000 + offset)

    data = ToyData(
        root,
        train=corpus("train", setup.train_per_task, sp_train, nz_train, 1),
        val=corpus("val", setup.val_per_task, sp_train, nz_train, 2),
        test=corpus("test", setup.test_per_task, sp_test, nz_test, 3),
    )
    for n in paired_counts:
        data.paired[n] = generate_paired_corpus(
            sp_test, nz_test, n, setup.paired_per_count, root / f"paired{n}", setup.seed * 1000 + 10 + n
        )
    return data


# desk-scale training defaults: short crops, frequent validation
DESK_TRAIN = TrainConfig(batch_size=4, segment_seconds=0.5, steps=1500, validate_every=250)


def train_toy(
    data: ToyData,
    strategy: str,
    out_dir: str | Path | None = None,
    steps: int | None = None,
    config: SeparatorConfig = SeparatorConfig(),
    base: TrainConfig = DESK_TRAIN,
    seed: int = 17,
) -> TrainResult:
    tasks = tuple(STRATEGY_TASKS[strategy])
    cfg = replace(base, strategy=strategy, tasks=tasks, seed=seed, steps=steps or base.steps)
    corpora = load_corpus(data.train, tasks)
    validation = ValidationSet(load_corpus(data.val, tasks))
    if strategy == "cascade":
        return train_cascade(build_model(config, seed), build_model(config, seed + 1), corpora, cfg, validation, out_dir)
    heads = 3 if strategy == "a2pit" else 2
    model = build_model(replace(config, num_output_heads=heads), seed)
    return TRAINERS[strategy](model, corpora, cfg, validation, out_dir=out_dir)


def evaluate_toy(model: torch.nn.Module, data: ToyData, name: str, configs: Sequence[str] | None = None,
                 trained_tasks: Sequence[str] = ()) -> EvalReport:
    if getattr(model, "num_heads", 2) > 2:
        system = A2PITSystem(model, name=name)
    else:
        system = RecursiveSystem(model, "known", name)
    return evaluate(system, data.test, configs, metadata={"trained_tasks": list(trained_tasks)})


def degradation_toy(model: torch.nn.Module, data: ToyData, num_speakers: int = 2):
    clean, noisy = data.paired[num_speakers]
    return degradation_analysis(model, clean, noisy)


def residual_stop_accuracy(model: torch.nn.Module, data: ToyData, tag: str = "3sp", threshold_db: float = -25.0,
                           limit: int = 50) -> tuple[float, list[int]]:
    """Fraction of ``tag`` test mixtures where the residual-energy rule stops at the true count."""
    entries = [e for e in read_manifest(data.test) if e.config.tag == tag][:limit]
    counts = []
    for e in entries:
        item = load_item(e, data.test.parent)
        res = separate_recursive(model, Waveform(item.mixture.astype(np.float64), SAMPLE_RATE),
                                 StopRule.residual_energy(threshold_db))
        counts.append(len(res.extracted_sources))
    n = entries[0].config.num_speakers if entries else 0
    return (float(np.mean([c == n for c in counts])) if counts else float("nan")), counts


def noise_sweep(
    system,
    speech_pool: Sequence[PoolItem],
    noise_pool: Sequence[PoolItem],
    out_dir: str | Path,
    tag: str = "2sp+n",
    snrs: Sequence[float] = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0),
    count: int = 20,
    seed: int = 0,
) -> dict[float, float]:
    """Mean SI-SNRi of ``system`` on test sets mixed at each fixed noise SNR.

    The same seed is used at every level, so only the noise level changes
    between sets. Pass a single-item ``noise_pool`` to sweep one noise type.
    """
    out_dir = Path(out_dir)
    result = {}
    for snr in snrs:
        config = TaskConfig.from_tag(tag, noise_snr_range=(snr, snr))
        manifest = generate_corpus(speech_pool, noise_pool, [(config, count)], out_dir / f"snr{snr:+g}", seed)
        report = evaluate(system, manifest)
        result[float(snr)] = report.task_stats()[tag]["mean"]
    return result
