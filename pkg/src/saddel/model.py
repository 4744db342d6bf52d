"""One-and-rest separator: learned basis encoder, dilated TCN mask estimator, decoder."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import Waveform

CHECKPOINT_FORMAT = "saddel-checkpoint"
CHECKPOINT_VERSION = 1


class IncompatibleCheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class SeparatorConfig:
    encoder_basis_count: int = 128
    encoder_window: int = 16
    encoder_stride: int = 8
    block_channels: int = 64
    hidden_channels: int = 128
    kernel_size: int = 3
    blocks_per_repeat: int = 4
    repeats: int = 2
    mask_nonlinearity: str = "sigmoid"
    num_output_heads: int = 2

    def __post_init__(self):
        if self.encoder_stride > self.encoder_window:
            raise ValueError("encoder_stride must not exceed encoder_window")
        if self.num_output_heads < 2:
            raise ValueError("need at least two output heads")
        if self.mask_nonlinearity not in MASK_FNS:
            raise ValueError(f"unknown mask nonlinearity {self.mask_nonlinearity!r}")


MASK_FNS = {"sigmoid": torch.sigmoid, "relu": F.relu, "softplus": F.softplus}


@dataclass
class SeparationOutput:
    extracted: Waveform
    residual: Waveform


class TCNBlock(nn.Module):
    def __init__(self, channels: int, hidden: int, kernel: int, dilation: int, residual: bool = True):
        super().__init__()
        self.conv_in = nn.Conv1d(channels, hidden, 1)
        self.act1 = nn.PReLU()
        self.norm1 = nn.GroupNorm(1, hidden, eps=1e-8)
        self.depthwise = nn.Conv1d(
            hidden, hidden, kernel, dilation=dilation, padding=dilation * (kernel - 1) // 2, groups=hidden
        )
        self.act2 = nn.PReLU()
        self.norm2 = nn.GroupNorm(1, hidden, eps=1e-8)
        # the last block only feeds the skip path
        self.res = nn.Conv1d(hidden, channels, 1) if residual else None
        self.skip = nn.Conv1d(hidden, channels, 1)

    def forward(self, x):
        y = self.norm1(self.act1(self.conv_in(x)))
        y = self.norm2(self.act2(self.depthwise(y)))
        out = x if self.res is None else x + self.res(y)
        return out, self.skip(y)


class Separator(nn.Module):
    """Maps ``[batch, time]`` mixtures to ``[batch, heads, time]`` estimates.

    Head 0 is the extracted source and head 1 the residual ("rest"). Encoder
    and decoder are shared; only the mask projection is split per head.
    """

    def __init__(self, config: SeparatorConfig = SeparatorConfig()):
        super().__init__()
        self.config = config
        c = config
        self.encoder = nn.Conv1d(1, c.encoder_basis_count, c.encoder_window, stride=c.encoder_stride, bias=False)
        self.in_norm = nn.GroupNorm(1, c.encoder_basis_count, eps=1e-8)
        self.bottleneck = nn.Conv1d(c.encoder_basis_count, c.block_channels, 1)
        n_blocks = c.repeats * c.blocks_per_repeat
        self.blocks = nn.ModuleList(
            TCNBlock(c.block_channels, c.hidden_channels, c.kernel_size, 2 ** (k % c.blocks_per_repeat),
                     residual=k < n_blocks - 1)
            for k in range(n_blocks)
        )
        self.mask_act = nn.PReLU()
        self.mask = nn.Conv1d(c.block_channels, c.num_output_heads * c.encoder_basis_count, 1)
        self.decoder = nn.ConvTranspose1d(
            c.encoder_basis_count, 1, c.encoder_window, stride=c.encoder_stride, bias=False
        )

    @property
    def num_heads(self) -> int:
        return self.config.num_output_heads

    def _pad(self, x: torch.Tensor) -> tuple[torch.Tensor, int]:
        win, hop = self.config.encoder_window, self.config.encoder_stride
        left = win - hop
        body = left + x.shape[-1]
        right = left + (-(body + left - win)) % hop
        # reflect padding cannot exceed the signal; fall back to zeros for tiny inputs
        mode = "reflect" if max(left, right) < x.shape[-1] else "constant"
        return F.pad(x.unsqueeze(1), (left, right), mode=mode).squeeze(1), left

    def forward(self, mixture: torch.Tensor) -> torch.Tensor:
        squeeze = mixture.dim() == 1
        if squeeze:
            mixture = mixture.unsqueeze(0)
        length = mixture.shape[-1]
        if length < self.config.encoder_window:
            raise ValueError(
                f"input of {length} samples is shorter than the analysis window ({self.config.encoder_window})"
            )
        x, offset = self._pad(mixture)
        w = F.relu(self.encoder(x.unsqueeze(1)))
        y = self.bottleneck(self.in_norm(w))
        skip = 0
        for block in self.blocks:
            y, s = block(y)
            skip = skip + s
        masks = MASK_FNS[self.config.mask_nonlinearity](self.mask(self.mask_act(skip)))
        batch, heads, basis = w.shape[0], self.num_heads, self.config.encoder_basis_count
        masked = masks.view(batch, heads, basis, -1) * w.unsqueeze(1)
        out = self.decoder(masked.reshape(batch * heads, basis, -1)).view(batch, heads, -1)
        out = out[..., offset : offset + length]
        return out.squeeze(0) if squeeze else out

    def separate(self, mixture: Waveform) -> SeparationOutput:
        """Inference on one waveform; returns ``(extracted, residual)``."""
        out = infer(self, mixture.samples)
        return SeparationOutput(Waveform(out[0], mixture.sample_rate), Waveform(out[1], mixture.sample_rate))


class CascadeSeparator(nn.Module):
    """Denoising stage followed by a separation stage: ``ss(sd(m)[0])``."""

    def __init__(self, sd: nn.Module | None, ss: Separator):
        super().__init__()
        self.sd = sd
        self.ss = ss

    @property
    def num_heads(self) -> int:
        return self.ss.num_heads

    def denoise(self, mixture: torch.Tensor) -> torch.Tensor:
        if self.sd is None:
            return mixture
        return self.sd(mixture)[..., 0, :]

    def forward(self, mixture: torch.Tensor) -> torch.Tensor:
        return self.ss(self.denoise(mixture))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def infer(model: nn.Module, samples: np.ndarray) -> np.ndarray:
    """Run ``model`` in eval mode on a 1-D array; returns ``[heads, time]`` float64."""
    was_training = model.training
    model.eval()
    try:
        x = torch.as_tensor(np.asarray(samples), dtype=model_dtype(model))
        out = model(x)
    finally:
        model.train(was_training)
    return out.double().numpy()


@dataclass
class ModelCheckpoint:
    config: SeparatorConfig
    state_dict: dict
    metadata: dict = field(default_factory=dict)
    optimizer_state: dict | None = None

    def build(self) -> Separator:
        model = Separator(self.config)
        dtype = next(iter(self.state_dict.values())).dtype
        model.to(dtype)
        model.load_state_dict(self.state_dict)
        return model


def checkpoint_of(model: Separator, metadata: dict | None = None, optimizer_state: dict | None = None) -> ModelCheckpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return ModelCheckpoint(model.config, state, dict(metadata or {}), optimizer_state)


def save(model: Separator | ModelCheckpoint, path: str | Path, metadata: dict | None = None,
         optimizer_state: dict | None = None) -> None:
    """Write a single-file checkpoint: version tag, JSON header, named parameter arrays."""
    ckpt = model if isinstance(model, ModelCheckpoint) else checkpoint_of(model, metadata, optimizer_state)
    header = json.dumps({"config": asdict(ckpt.config), "metadata": ckpt.metadata}, sort_keys=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header,
        "params": ckpt.state_dict,
        "optimizer": ckpt.optimizer_state,
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path, expected_config: SeparatorConfig | None = None) -> ModelCheckpoint:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpointError(f"{path} is not a separator checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    header = json.loads(payload["header"])
    config = SeparatorConfig(**header["config"])
    if expected_config is not None and expected_config != config:
        raise IncompatibleCheckpointError(f"{path}: stored config {config} does not match {expected_config}")
    return ModelCheckpoint(config, payload["params"], header["metadata"], payload.get("optimizer"))


def load(path: str | Path, expected_config: SeparatorConfig | None = None) -> Separator:
    return load_checkpoint(path, expected_config).build()
