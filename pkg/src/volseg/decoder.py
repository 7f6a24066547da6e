"""Trainable 3D convolutional decoder over stacked slice embeddings.

Input is an embedding volume (C, D, H/16, W/16). Four residual 3D conv
blocks each halve the channel count trajectory (default 128, 64, 32, 16)
and upsample in-plane by 2 with trilinear interpolation; depth is never
resampled. After four doublings the in-plane resolution matches the
original volume. Segmentation heads tap the last three block outputs,
yielding logits at full, half, and quarter in-plane resolution for deep
supervision.

``count_parameters`` gives a closed-form trainable-parameter count that
must match ``sum(p.numel() for p in model.parameters())`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .encoder import EmbeddingVolume

NUM_BLOCKS = 4
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class DecoderConfig:
    in_channels: int
    num_classes: int
    block_channels: tuple[int, int, int, int] = (128, 64, 32, 16)

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be positive, got {self.in_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if len(self.block_channels) != NUM_BLOCKS:
            raise ValueError(f"expected {NUM_BLOCKS} block widths, got {self.block_channels}")
        if any(c < 1 for c in self.block_channels):
            raise ValueError(f"block widths must be positive, got {self.block_channels}")
        if any(a <= b for a, b in zip(self.block_channels, self.block_channels[1:])):
            raise ValueError(f"block widths must strictly decrease, got {self.block_channels}")

    @property
    def channel_trajectory(self) -> tuple[int, ...]:
        return (self.in_channels,) + self.block_channels


def _upsample_inplane(x: torch.Tensor) -> torch.Tensor:
    """Double H and W with trilinear interpolation; depth untouched."""
    d, h, w = x.shape[-3:]
    return F.interpolate(x, size=(d, 2 * h, 2 * w), mode="trilinear", align_corners=False)


class ResidualBlock3d(nn.Module):
    """conv3 -> IN -> LeakyReLU -> conv3 -> IN, plus a 1x1x1-projected skip."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm3d(out_channels, affine=True)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(out_channels, affine=True)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        if in_channels != out_channels:
            self.proj = nn.Conv3d(in_channels, out_channels, 1)
        else:
            self.proj = nn.Identity()

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(y + self.proj(x))


class SegmentationHead(nn.Module):
    """conv3 halving channels -> IN -> LeakyReLU -> 1x1x1 conv to class logits."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        mid = max(in_channels // 2, 1)
        self.conv1 = nn.Conv3d(in_channels, mid, 3, padding=1)
        self.norm = nn.InstanceNorm3d(mid, affine=True)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.conv2 = nn.Conv3d(mid, num_classes, 1)

    def forward(self, x):
        return self.conv2(self.act(self.norm(self.conv1(x))))


class Decoder3d(nn.Module):
    """Four upsampling residual blocks with three deep-supervision heads.

    ``forward`` takes (B, C, D, h, w) embeddings and returns logits ordered
    finest first: ``[full, half, quarter]`` in-plane resolution, all with
    the input depth.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channel_trajectory
        self.blocks = nn.ModuleList(
            ResidualBlock3d(chans[i], chans[i + 1]) for i in range(NUM_BLOCKS)
        )
        self.heads = nn.ModuleList(
            SegmentationHead(c, cfg.num_classes) for c in cfg.block_channels[1:]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 5:
            raise ShapeError(f"expected (B, C, D, h, w) input, got {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        if x.shape[2] * x.shape[3] * x.shape[4] < 2:
            # instance statistics over one element are undefined (sigma = 0)
            raise ShapeError(
                f"embedding spatial extent {tuple(x.shape[2:])} has a single "
                "element; need at least two slices or a 32-pixel plane"
            )
        taps = []
        for block in self.blocks:
            x = _upsample_inplane(block(x))
            taps.append(x)
        # heads[j] reads block j+2; reverse so the finest stage comes first
        logits = [head(tap) for head, tap in zip(self.heads, taps[1:])]
        return logits[::-1]


@dataclass
class DecoderOutputs:
    """Per-stage logits for one volume, finest in-plane resolution first."""

    stages: tuple[torch.Tensor, ...]

    @property
    def segmentation_logits(self) -> torch.Tensor:
        return self.stages[0]


def decoder_forward(emb: EmbeddingVolume | np.ndarray, model: Decoder3d) -> DecoderOutputs:
    """Run one embedding volume (C, D, h, w) through the decoder, grad-free
    and in eval mode (the caller's mode is restored afterwards)."""
    data = emb.data if isinstance(emb, EmbeddingVolume) else np.asarray(emb, dtype=np.float32)
    if data.ndim != 4:
        raise ShapeError(f"expected (C, D, h, w) embedding, got {data.shape}")
    x = torch.from_numpy(np.ascontiguousarray(data)).unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            stages = model(x)
    finally:
        model.train(was_training)
    return DecoderOutputs(stages=tuple(s.squeeze(0) for s in stages))


@dataclass
class ParameterCount:
    total: int
    by_layer: dict[str, int] = field(default_factory=dict)


def count_parameters(cfg: DecoderConfig) -> ParameterCount:
    """Closed-form trainable parameter count, broken down per layer.

    3x3x3 convs cost 27*cin*cout + cout, 1x1x1 convs cin*cout + cout,
    affine instance norms 2*c. Keys mirror module parameter paths.
    """
    by_layer: dict[str, int] = {}
    chans = cfg.channel_trajectory
    for i in range(NUM_BLOCKS):
        cin, cout = chans[i], chans[i + 1]
        p = f"blocks.{i}"
        by_layer[f"{p}.conv1"] = 27 * cin * cout + cout
        by_layer[f"{p}.norm1"] = 2 * cout
        by_layer[f"{p}.conv2"] = 27 * cout * cout + cout
        by_layer[f"{p}.norm2"] = 2 * cout
        if cin != cout:
            by_layer[f"{p}.proj"] = cin * cout + cout
    for j, c in enumerate(cfg.block_channels[1:]):
        mid = max(c // 2, 1)
        p = f"heads.{j}"
        by_layer[f"{p}.conv1"] = 27 * c * mid + mid
        by_layer[f"{p}.norm"] = 2 * mid
        by_layer[f"{p}.conv2"] = mid * cfg.num_classes + cfg.num_classes
    return ParameterCount(total=sum(by_layer.values()), by_layer=by_layer)


def initialize_weights(model: nn.Module, seed: int) -> nn.Module:
    """Deterministic init: Kaiming fan-in normal convs (std = sqrt(2/fan_in)),
    zero biases, unit norm scales. Parameters are visited in sorted name
    order from a single seeded generator."""
    gen = torch.Generator().manual_seed(seed)
    for name, param in sorted(model.named_parameters()):
        with torch.no_grad():
            if param.ndim >= 2:
                fan_in = param[0].numel()
                std = math.sqrt(2.0 / fan_in)
                param.copy_(torch.empty_like(param).normal_(0.0, std, generator=gen))
            elif name.endswith("bias"):
                param.zero_()
            else:
                param.fill_(1.0)
    return model


def build_decoder(cfg: DecoderConfig, seed: int = 0) -> Decoder3d:
    return initialize_weights(Decoder3d(cfg), seed)
