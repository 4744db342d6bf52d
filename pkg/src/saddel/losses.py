"""Training objectives built on negative SI-SNR.

All tensor functions broadcast over leading batch dimensions; the last axis is
time. Indices are 0-based.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .audio import EPS, SI_SNR_CAP, Waveform, si_snr


def as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    """Waveform, array, tensor, or a sequence of them (stacked on a new axis -2)."""
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, Waveform):
        return torch.from_numpy(x.samples).to(dtype)
    if isinstance(x, (list, tuple)):
        return torch.stack([as_tensor(v, dtype) for v in x], dim=-2)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def si_snr_t(estimate: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Differentiable SI-SNR in dB, saturated at ``±SI_SNR_CAP``.

    Same definition as :func:`saddel.audio.si_snr` (relative ``EPS`` floor,
    silent estimate -> ``-SI_SNR_CAP``). A zero-energy reference yields NaN
    here; callers decide how to handle it.
    """
    est = estimate - estimate.mean(-1, keepdim=True)
    ref = reference - reference.mean(-1, keepdim=True)
    ref_energy = (ref * ref).sum(-1, keepdim=True)
    target = (est * ref).sum(-1, keepdim=True) / ref_energy * ref
    error = est - target
    tiny = torch.finfo(est.dtype).tiny
    est_energy = (est * est).sum(-1)
    num = (target * target).sum(-1).clamp_min(tiny)
    den = ((error * error).sum(-1) + EPS * est_energy).clamp_min(tiny)
    value = torch.clamp(10.0 * torch.log10(num / den), -SI_SNR_CAP, SI_SNR_CAP)
    return torch.where(est_energy == 0, torch.full_like(value, -SI_SNR_CAP), value)


def neg_si_snr(estimate: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    return -si_snr_t(estimate, reference)


def target_loss(estimate: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Negative SI-SNR, or an energy penalty on ``estimate`` when the target is silent.

    Silent targets occur as rest targets of clean single-speaker inputs and in
    short crops that fall into pauses.
    """
    centred = target - target.mean(-1, keepdim=True)
    silent = (centred * centred).sum(-1) <= torch.finfo(target.dtype).tiny
    # swap in a harmless target so the unused branch keeps finite gradients
    safe_target = torch.where(silent.unsqueeze(-1), torch.ones_like(target).cumsum(-1), target)
    penalty = 10.0 * torch.log10((estimate * estimate).sum(-1) + EPS)
    return torch.where(silent, penalty, neg_si_snr(estimate, safe_target))


@dataclass
class Assignment:
    index: torch.Tensor
    loss: torch.Tensor
    candidates: torch.Tensor


def orpit_loss(
    extracted,
    residual,
    sources,
    noise=None,
) -> Assignment:
    """One-and-rest PIT: ``min_i l(extracted, s_i) + l(residual, sum_{n != i} s_n)``.

    Noise, when present, joins the rest target. With a single source the only
    candidate is ``extracted -> s_1, residual -> noise``. Only N candidates are
    evaluated; ties go to the lowest index.
    """
    extracted, residual, sources = as_tensor(extracted), as_tensor(residual), as_tensor(sources)
    if noise is not None:
        noise = as_tensor(noise)
    n = sources.shape[-2]
    if n < 1:
        raise ValueError("need at least one source")
    if n == 1 and noise is None:
        raise ValueError("one source without noise leaves nothing to separate")
    others = 1.0 - torch.eye(n, dtype=sources.dtype)
    rest = torch.einsum("ij,...jt->...it", others, sources)
    if noise is not None:
        rest = rest + noise.unsqueeze(-2)
    one = target_loss(extracted.unsqueeze(-2).expand_as(sources), sources)
    candidates = one + target_loss(residual.unsqueeze(-2).expand_as(rest), rest)
    loss, index = candidates.min(dim=-1)
    return Assignment(index, loss, candidates)


def pairwise_loss(estimates: torch.Tensor, sources: torch.Tensor) -> torch.Tensor:
    """``[..., j, k] = l(estimate_j, source_k)``."""
    est, src = torch.broadcast_tensors(estimates.unsqueeze(-2), sources.unsqueeze(-3))
    return target_loss(est, src)


def full_pit_loss(estimates, sources) -> tuple[torch.Tensor, torch.Tensor]:
    """Exhaustive PIT over all N! pairings; loss is the mean over channels.

    Returns ``(perm, loss)`` where estimate ``j`` is paired with source ``perm[j]``.
    """
    estimates, sources = as_tensor(estimates), as_tensor(sources)
    n = estimates.shape[-2]
    if sources.shape[-2] != n:
        raise ValueError(f"{n} estimates vs {sources.shape[-2]} sources")
    pair = pairwise_loss(estimates, sources)
    perms = torch.tensor(list(itertools.permutations(range(n))), dtype=torch.long)
    rows = torch.arange(n)
    per_perm = torch.stack([pair[..., rows, p].mean(-1) for p in perms], dim=-1)
    loss, best = per_perm.min(dim=-1)
    return perms[best], loss


def a2pit_targets(sources, mixture, num_outputs: int) -> torch.Tensor:
    sources, mixture = as_tensor(sources), as_tensor(mixture)
    n = sources.shape[-2]
    if n > num_outputs:
        raise ValueError(f"{n} sources exceed {num_outputs} output channels")
    pad = mixture.unsqueeze(-2).expand(*mixture.shape[:-1], num_outputs - n, mixture.shape[-1])
    return torch.cat([sources, pad], dim=-2)


def a2pit_loss(estimates, sources, mixture) -> tuple[torch.Tensor, torch.Tensor]:
    """Fixed-output PIT whose surplus channels target the input mixture."""
    estimates = as_tensor(estimates)
    targets = a2pit_targets(sources, mixture, estimates.shape[-2])
    return full_pit_loss(estimates, targets)


def autoencoding_channels(estimates: Sequence, mixture, threshold: float) -> list[bool]:
    """True for each channel whose SI-SNR against the mixture exceeds ``threshold``."""
    return [si_snr(e, mixture) > threshold for e in estimates]


def valid_source_count(estimates: Sequence, mixture, threshold: float) -> int:
    """Channels not classified as autoencoding the mixture, floored at 1."""
    if len(estimates) < 1:
        raise ValueError("need at least one channel")
    invalid = sum(autoencoding_channels(estimates, mixture, threshold))
    return max(1, len(estimates) - invalid)
