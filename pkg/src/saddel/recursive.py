"""Recursive one-and-rest extraction for an unknown number of sources."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import torch.nn as nn

from .audio import Waveform
from .model import infer

DEFAULT_RESIDUAL_DB = -25.0
DEFAULT_MAX_ITERATIONS = 5

COUNT_REACHED = "count_reached"
RESIDUAL_BELOW_THRESHOLD = "residual_below_threshold"
MAX_ITERATIONS = "max_iterations"

# a separator maps one input signal to (extracted, residual)
SeparatorFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class NonFiniteOutput(RuntimeError):
    pass


@dataclass(frozen=True)
class StopRule:
    """Conjunction of an optional count, an optional residual-energy floor and a hard cap."""

    count: int | None = None
    residual_db: float | None = DEFAULT_RESIDUAL_DB
    max_iterations: int = DEFAULT_MAX_ITERATIONS

    def __post_init__(self):
        if self.count is not None and self.count < 1:
            raise ValueError(f"known count must be >= 1, got {self.count}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")

    @classmethod
    def known_count(cls, k: int, max_iterations: int = DEFAULT_MAX_ITERATIONS) -> "StopRule":
        return cls(count=k, residual_db=None, max_iterations=max(k, max_iterations))

    @classmethod
    def residual_energy(cls, threshold_db: float = DEFAULT_RESIDUAL_DB,
                        max_iterations: int = DEFAULT_MAX_ITERATIONS) -> "StopRule":
        return cls(count=None, residual_db=threshold_db, max_iterations=max_iterations)

    @classmethod
    def max_only(cls, max_iterations: int = DEFAULT_MAX_ITERATIONS) -> "StopRule":
        return cls(count=None, residual_db=None, max_iterations=max_iterations)

    @classmethod
    def parse(cls, text: str, max_iterations: int = DEFAULT_MAX_ITERATIONS) -> "StopRule":
        """``known:K``, ``residual:DB`` or ``max``."""
        kind, _, arg = text.partition(":")
        if kind == "known":
            return cls.known_count(int(arg), max_iterations)
        if kind == "residual":
            return cls.residual_energy(float(arg) if arg else DEFAULT_RESIDUAL_DB, max_iterations)
        if kind == "max":
            return cls.max_only(max_iterations)
        raise ValueError(f"unknown stop rule {text!r}")


@dataclass
class RecursionResult:
    extracted_sources: list[Waveform]
    final_residual: Waveform
    stop_reason: str
    residual_energy_db: list[float] = field(default_factory=list)

    def report(self) -> dict:
        return {
            "num_sources": len(self.extracted_sources),
            "stop_reason": self.stop_reason,
            "residual_energy_db": self.residual_energy_db,
        }


def as_separator_fn(model: Union[nn.Module, SeparatorFn]) -> SeparatorFn:
    if isinstance(model, nn.Module):
        def run(x: np.ndarray):
            out = infer(model, x)
            return out[0], out[1]
        return run
    return model


def _energy_ratio_db(residual: np.ndarray, mixture_energy: float) -> float:
    e = float(np.dot(residual, residual))
    if e == 0.0:
        return -np.inf
    return 10.0 * np.log10(e / mixture_energy)


def separate_recursive(
    model: Union[nn.Module, SeparatorFn],
    mixture: Waveform,
    stop: StopRule = StopRule(),
) -> RecursionResult:
    """Feed each residual back through the separator until ``stop`` fires.

    Sources come back in extraction order and are not rescaled.
    """
    sr = mixture.sample_rate
    m = mixture.samples
    m_energy = float(np.dot(m, m))
    if m_energy == 0.0 and stop.residual_db is not None:
        # silent input: the energy ratio is -inf before any model call
        zeros = np.zeros_like(m)
        return RecursionResult([Waveform(zeros, sr)], Waveform(zeros, sr), RESIDUAL_BELOW_THRESHOLD, [-np.inf])

    step = as_separator_fn(model)
    residual = m
    extracted: list[Waveform] = []
    energies: list[float] = []
    reason = MAX_ITERATIONS
    for j in range(1, stop.max_iterations + 1):
        s_hat, r_hat = step(residual)
        s_hat, r_hat = np.asarray(s_hat, dtype=np.float64), np.asarray(r_hat, dtype=np.float64)
        if not (np.all(np.isfinite(s_hat)) and np.all(np.isfinite(r_hat))):
            raise NonFiniteOutput(f"separator produced non-finite output at step {j}; residual energies {energies}")
        extracted.append(Waveform(s_hat, sr))
        residual = r_hat
        ratio = _energy_ratio_db(r_hat, m_energy) if m_energy > 0 else -np.inf
        energies.append(ratio)
        if stop.count is not None and j >= stop.count:
            reason = COUNT_REACHED
            break
        if stop.residual_db is not None and ratio < stop.residual_db:
            reason = RESIDUAL_BELOW_THRESHOLD
            break
    return RecursionResult(extracted, Waveform(residual, sr), reason, energies)
