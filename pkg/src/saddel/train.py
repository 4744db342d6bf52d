"""Multitask training (SADDEL) and the baseline, cascade and A2PIT regimes."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import model as model_io
from .data import Batch, TaskData, collate, seconds_to_samples
from .losses import a2pit_loss, orpit_loss, si_snr_t, target_loss
from .model import CascadeSeparator, ModelCheckpoint, Separator, SeparatorConfig, count_parameters
from .synth import TASK_TAGS

log = logging.getLogger(__name__)

STRATEGY_TASKS = {
    "saddel": TASK_TAGS,
    "baseline_ss": ("2sp+n", "3sp+n"),
    "baseline_sd": ("1sp+n",),
    "a2pit": ("1sp+n", "2sp+n", "3sp+n"),
    "cascade": ("2sp+n", "3sp+n"),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    strategy: str = "saddel"
    tasks: tuple[str, ...] | None = None
    batch_size: int = 4
    segment_seconds: float = 4.0
    steps: int = 20000
    lr: float = 1e-3
    l2: float = 0.0
    plateau_patience: int = 3
    lr_decay: float = 0.5
    grad_clip: float | None = 5.0
    seed: int = 17
    validate_every: int = 500
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGY_TASKS:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.tasks is None:
            self.tasks = tuple(STRATEGY_TASKS[self.strategy])
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ValueError("at least one task is required")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def segment(self) -> int:
        return seconds_to_samples(self.segment_seconds)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLogRecord:
    step: int
    task_losses: dict[str, float]
    loss: float
    lr: float
    val_si_snri: dict[str, float] | None = None
    val_loss: float | None = None
    extras: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    model: nn.Module
    checkpoint: ModelCheckpoint | dict[str, ModelCheckpoint]
    log: list[TrainLogRecord]
    optimizer: torch.optim.Optimizer


# each loss fn maps (model, batch) -> (scalar loss, extra scalars for logging)
LossFn = Callable[[nn.Module, Batch], tuple[torch.Tensor, dict[str, torch.Tensor]]]


def orpit_step_loss(model: nn.Module, batch: Batch):
    out = model(batch.mixture)
    a = orpit_loss(out[:, 0], out[:, 1], batch.sources, batch.noise)
    return a.loss.mean(), {}


def a2pit_step_loss(model: nn.Module, batch: Batch):
    out = model(batch.mixture)
    perm, loss = a2pit_loss(out, batch.sources, batch.mixture)
    extras = {}
    spare = perm >= batch.sources.shape[1]
    if spare.any():
        # how closely the surplus heads copy the mixture
        with torch.no_grad():
            sim = si_snr_t(out, batch.mixture.unsqueeze(1).expand_as(out))
        extras["autoencode_si_snr"] = sim[spare].mean()
    return loss.mean(), extras


def cascade_step_loss(model: CascadeSeparator, batch: Batch):
    denoised = model.denoise(batch.mixture)
    out = model.ss(denoised)
    # after denoising the rest target is speech only; a lone speaker leaves silence
    noise = torch.zeros_like(batch.mixture) if batch.sources.shape[1] == 1 else None
    ss_loss = orpit_loss(out[:, 0], out[:, 1], batch.sources, noise).loss.mean()
    extras = {"ss_loss": ss_loss}
    if model.sd is None:
        return ss_loss, extras
    sd_loss = target_loss(denoised, batch.sources.sum(1)).mean()
    extras["sd_loss"] = sd_loss
    return ss_loss + sd_loss, extras


def orpit_val_scores(model: nn.Module, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-item (loss, SI-SNRi of the extracted head against its assigned source)."""
    out = model(batch.mixture)
    a = orpit_loss(out[:, 0], out[:, 1], batch.sources, batch.noise)
    target = batch.sources.gather(1, a.index.view(-1, 1, 1).expand(-1, 1, batch.sources.shape[-1]))[:, 0]
    improvement = si_snr_t(out[:, 0], target) - si_snr_t(batch.mixture, target)
    return a.loss, improvement


def a2pit_val_scores(model: nn.Module, batch: Batch):
    out = model(batch.mixture)
    perm, loss = a2pit_loss(out, batch.sources, batch.mixture)
    n = batch.sources.shape[1]
    scores = []
    for b in range(out.shape[0]):
        chans = [j for j in range(out.shape[1]) if perm[b, j] < n]
        imp = [
            si_snr_t(out[b, j], batch.sources[b, perm[b, j]]) - si_snr_t(batch.mixture[b], batch.sources[b, perm[b, j]])
            for j in chans
        ]
        scores.append(torch.stack(imp).mean())
    return loss, torch.stack(scores)


def cascade_val_scores(model: CascadeSeparator, batch: Batch):
    loss, _ = cascade_step_loss(model, batch)
    out = model(batch.mixture)
    noise = torch.zeros_like(batch.mixture) if batch.sources.shape[1] == 1 else None
    a = orpit_loss(out[:, 0], out[:, 1], batch.sources, noise)
    target = batch.sources.gather(1, a.index.view(-1, 1, 1).expand(-1, 1, batch.sources.shape[-1]))[:, 0]
    improvement = si_snr_t(out[:, 0], target) - si_snr_t(batch.mixture, target)
    return loss.expand(out.shape[0]), improvement


class ValidationSet:
    """Fixed held-out items per task, scored full length in eval mode."""

    def __init__(self, corpora: Mapping[str, TaskData], max_items: int = 16):
        self.items = {}
        for tag, data in corpora.items():
            items = list(getattr(data, "items", []))[:max_items]
            if items:
                self.items[tag] = items

    @torch.no_grad()
    def evaluate(self, model: nn.Module, score_fn, tasks: Sequence[str]) -> tuple[dict[str, float], float]:
        was = model.training
        model.eval()
        si, losses = {}, []
        try:
            for tag in tasks:
                if tag not in self.items:
                    continue
                vals, ls = [], []
                for it in self.items[tag]:
                    batch = collate([it], [0], it.mixture.shape[0], dtype=_dtype_of(model))
                    loss, imp = score_fn(model, batch)
                    vals.append(float(imp.mean()))
                    ls.append(float(loss.mean()))
                si[tag] = float(np.mean(vals))
                losses.append(float(np.mean(ls)))
        finally:
            model.train(was)
        return si, float(np.mean(losses)) if losses else float("nan")


def _dtype_of(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def batch_rng(seed: int, step: int, task_index: int) -> np.random.Generator:
    """Randomness for one task batch, keyed only by ``(seed, step, task)``."""
    return np.random.default_rng([int(seed), int(step), int(task_index)])


def build_model(config: SeparatorConfig = SeparatorConfig(), seed: int = 17, dtype=torch.float32) -> Separator:
    torch.manual_seed(seed)
    return Separator(config).to(dtype)


def _as_dtype(batch: Batch, dtype) -> Batch:
    if batch.mixture.dtype == dtype:
        return batch
    return Batch(
        batch.mixture.to(dtype),
        batch.sources.to(dtype),
        None if batch.noise is None else batch.noise.to(dtype),
    )


def run_training(
    model: nn.Module,
    corpora: Mapping[str, TaskData],
    cfg: TrainConfig,
    loss_fn: LossFn,
    score_fn=None,
    validation: ValidationSet | None = None,
    resume: dict | None = None,
    out_dir: str | Path | None = None,
    save_fn: Callable[[nn.Module, dict, Path], None] | None = None,
) -> tuple[list[TrainLogRecord], torch.optim.Optimizer, dict]:
    """The shared optimisation loop.

    Every step evaluates one batch per task, averages the task losses and
    applies exactly one optimizer update. ``resume`` is a state dict produced
    by an earlier call (``optimizer``, ``scheduler``, ``step``).
    """
    missing = [t for t in cfg.tasks if t not in corpora]
    if missing:
        raise ValueError(f"no corpus for task(s) {missing}")
    dtype = _dtype_of(model)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.l2)
    sched = {"lr": cfg.lr, "best": math.inf, "bad": 0}
    start = 0
    if resume is not None:
        optimizer.load_state_dict(resume["optimizer"])
        sched = dict(resume["scheduler"])
        start = int(resume["step"])
    for group in optimizer.param_groups:
        group["lr"] = sched["lr"]

    out_dir = Path(out_dir) if out_dir is not None else None
    records: list[TrainLogRecord] = []
    t0 = time.perf_counter()
    model.train()
    for step in range(start + 1, cfg.steps + 1):
        task_losses, extras = {}, {}
        total = 0.0
        for k, tag in enumerate(cfg.tasks):
            batch = _as_dtype(corpora[tag].sample_batch(batch_rng(cfg.seed, step, k), cfg.batch_size, cfg.segment), dtype)
            loss, extra = loss_fn(model, batch)
            total = total + loss
            task_losses[tag] = float(loss.detach())
            for name, v in extra.items():
                extras[f"{tag}/{name}"] = float(v.detach())
        total = total / len(cfg.tasks)
        record = TrainLogRecord(
            step=step,
            task_losses=task_losses,
            loss=float(np.mean(list(task_losses.values()))),
            lr=optimizer.param_groups[0]["lr"],
            extras=extras,
        )
        if not torch.isfinite(total):
            record.wall_time = time.perf_counter() - t0
            raise TrainingDiverged(f"non-finite loss at step {step}: {task_losses}", asdict(record))
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        optimizer.step()

        if validation is not None and cfg.validate_every and (step % cfg.validate_every == 0 or step == cfg.steps):
            si, vloss = validation.evaluate(model, score_fn, cfg.tasks)
            record.val_si_snri, record.val_loss = si, vloss
            if vloss < sched["best"] - 1e-6:
                sched["best"], sched["bad"] = vloss, 0
            else:
                sched["bad"] += 1
                if sched["bad"] >= cfg.plateau_patience:
                    sched["lr"] *= cfg.lr_decay
                    sched["bad"] = 0
                    for group in optimizer.param_groups:
                        group["lr"] = sched["lr"]
            log.info("step %d loss %.3f val %s", step, record.loss, {k: round(v, 2) for k, v in si.items()})
        record.wall_time = time.perf_counter() - t0
        if cfg.log_every and (step % cfg.log_every == 0 or record.val_si_snri is not None):
            records.append(record)
        if out_dir is not None and save_fn is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_fn(model, _state(optimizer, sched, step), out_dir)
    return records, optimizer, _state(optimizer, sched, cfg.steps)


def _state(optimizer, sched, step) -> dict:
    return {"optimizer": optimizer.state_dict(), "scheduler": dict(sched), "step": int(step)}


def _metadata(cfg: TrainConfig, records: list[TrainLogRecord], state: dict) -> dict:
    last_val = next((r for r in reversed(records) if r.val_si_snri is not None), None)
    return {
        "strategy": cfg.strategy,
        "trained_tasks": list(cfg.tasks),
        "train_config": cfg.to_dict(),
        "step": state["step"],
        "val_si_snri": None if last_val is None else last_val.val_si_snri,
        "val_loss": None if last_val is None else last_val.val_loss,
    }


def write_log(records: Sequence[TrainLogRecord], path: str | Path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_log(path: str | Path) -> list[TrainLogRecord]:
    return [TrainLogRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def _single_model_trainer(loss_fn, score_fn, expected_heads: int | None):
    def train(
        model: Separator,
        corpora: Mapping[str, TaskData],
        cfg: TrainConfig,
        validation: ValidationSet | None = None,
        resume: ModelCheckpoint | None = None,
        out_dir: str | Path | None = None,
    ) -> TrainResult:
        if expected_heads is not None and model.num_heads != expected_heads:
            raise ValueError(f"{cfg.strategy} needs a {expected_heads}-head model, got {model.num_heads}")

        def save_fn(m, state, d):
            d.mkdir(parents=True, exist_ok=True)
            meta = _metadata(cfg, [], state)
            model_io.save(m, d / f"ckpt_{state['step']:06d}.pt", meta, state)

        state_in = None
        if resume is not None:
            model.load_state_dict(resume.state_dict)
            state_in = resume.optimizer_state
        records, optimizer, state = run_training(
            model, corpora, cfg, loss_fn, score_fn, validation, state_in, out_dir, save_fn
        )
        ckpt = model_io.checkpoint_of(model, _metadata(cfg, records, state), state)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            model_io.save(ckpt, out / "model.pt")
            write_log(records, out / "train_log.jsonl")
        return TrainResult(model, ckpt, records, optimizer)

    return train


_train_orpit = _single_model_trainer(orpit_step_loss, orpit_val_scores, 2)
_train_a2pit = _single_model_trainer(a2pit_step_loss, a2pit_val_scores, None)


def train_saddel(model, corpora, cfg: TrainConfig, validation=None, resume=None, out_dir=None) -> TrainResult:
    """One-and-rest training over every task in ``cfg.tasks`` with averaged losses.

    Also serves the single-corpus baselines (``baseline_ss``, ``baseline_sd``),
    which differ only in their task list.
    """
    return _train_orpit(model, corpora, cfg, validation, resume, out_dir)


def train_a2pit(model, corpora, cfg: TrainConfig, validation=None, resume=None, out_dir=None) -> TrainResult:
    """Fixed-output training where surplus heads autoencode the mixture."""
    for tag in cfg.tasks:
        n = corpora[tag].config.num_speakers
        if n > model.num_heads:
            raise ValueError(f"task {tag} has {n} sources but the model has {model.num_heads} heads")
    return _train_a2pit(model, corpora, cfg, validation, resume, out_dir)


def train_cascade(
    sd_model: Separator | None,
    ss_model: Separator,
    corpora: Mapping[str, TaskData],
    cfg: TrainConfig,
    validation: ValidationSet | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Jointly train a denoiser feeding a separator on the combined loss.

    ``sd_model=None`` stands for an identity denoising stage with no parameters.
    """
    model = CascadeSeparator(sd_model, ss_model)
    records, optimizer, state = run_training(model, corpora, cfg, cascade_step_loss, cascade_val_scores, validation)
    meta = _metadata(cfg, records, state)
    meta["parameters"] = parameter_report(model)
    ckpts = {"ss": model_io.checkpoint_of(ss_model, meta)}
    if sd_model is not None:
        ckpts["sd"] = model_io.checkpoint_of(sd_model, meta)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, ck in ckpts.items():
            model_io.save(ck, out / f"{name}.pt")
        write_log(records, out / "train_log.jsonl")
    return TrainResult(model, ckpts, records, optimizer)


def parameter_report(model: nn.Module) -> dict[str, int]:
    if isinstance(model, CascadeSeparator):
        sd = 0 if model.sd is None else count_parameters(model.sd)
        ss = count_parameters(model.ss)
        return {"sd": sd, "ss": ss, "total": sd + ss}
    return {"total": count_parameters(model)}


TRAINERS = {
    "saddel": train_saddel,
    "baseline_ss": train_saddel,
    "baseline_sd": train_saddel,
    "a2pit": train_a2pit,
}
