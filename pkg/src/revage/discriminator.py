"""Conditional discriminators: a patch-based image critic and a 3D video critic.

Both consume the target-age plane as a fourth input channel and emit spatial
score maps rather than scalars. Every convolution is followed by a leaky
activation and there are no normalization layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import AgeMask, Frame
from .errors import ConfigurationError, ValidationError
from .generator import frame_to_tensor


@dataclass(frozen=True)
class ImageDiscConfig:
    in_channels: int = 4  # RGB + target-age plane
    widths: tuple[int, ...] = (64, 128, 256, 512)
    leaky_slope: float = 0.2
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ImageDiscConfig":
        data = dict(data)
        data["widths"] = tuple(data["widths"])
        return cls(**data)


@dataclass(frozen=True)
class VideoDiscConfig:
    in_channels: int = 4
    temporal_extent: int = 3  # consecutive frames per sample
    widths: tuple[int, ...] = (32, 64, 128, 256)
    input_mode: str = "outputs"  # "outputs" | "deltas"
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.input_mode not in ("outputs", "deltas"):
            raise ConfigurationError(f"input_mode must be outputs|deltas, got {self.input_mode!r}")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "temporal_extent": self.temporal_extent,
            "widths": list(self.widths),
            "input_mode": self.input_mode,
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VideoDiscConfig":
        data = dict(data)
        data["widths"] = tuple(data["widths"])
        return cls(**data)


def _seeded_init(module: nn.Module, slope: float, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    gain = math.sqrt(2.0 / (1.0 + slope**2))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d)):
                fan_in = m.in_channels * math.prod(m.kernel_size)
                m.weight.normal_(0.0, gain / math.sqrt(fan_in), generator=gen)
                m.bias.zero_()


class PatchImageDiscriminator(nn.Module):
    """4x4 conv stack: three stride-2 stages then two stride-1 stages to 1 channel.

    A 512 input maps to a 64x64x1 patch score grid; stride-1 stages keep the
    spatial size via asymmetric same padding.
    """

    def __init__(self, config: ImageDiscConfig | None = None):
        super().__init__()
        self.config = config or ImageDiscConfig()
        w = self.config.widths
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(self.config.in_channels, w[0], 4, stride=2, padding=1),
                nn.Conv2d(w[0], w[1], 4, stride=2, padding=1),
                nn.Conv2d(w[1], w[2], 4, stride=2, padding=1),
                nn.Conv2d(w[2], w[3], 4, stride=1, padding=0),
                nn.Conv2d(w[3], 1, 4, stride=1, padding=0),
            ]
        )
        self.act = nn.LeakyReLU(self.config.leaky_slope)
        _seeded_init(self, self.config.leaky_slope, self.config.seed)

    def forward(self, frames: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
        """frames (B, 3, H, W) + mask (B, 1, H, W) -> scores (B, 1, H/8, W/8)."""
        if frames.shape[-2:] != target_mask.shape[-2:]:
            raise ValidationError(
                f"mask size {tuple(target_mask.shape[-2:])} does not match "
                f"frames {tuple(frames.shape[-2:])}"
            )
        x = torch.cat([frames, target_mask], dim=1)
        for conv in self.convs:
            if conv.stride[0] == 1:
                x = F.pad(x, (1, 2, 1, 2))
            x = self.act(conv(x))
        return x

    def layer_shapes(self, resolution: int = 512) -> list[tuple[str, tuple[int, ...]]]:
        rows = [("input", (resolution, resolution, self.config.in_channels))]
        h = resolution
        for i, conv in enumerate(self.convs, start=1):
            if conv.stride[0] == 2:
                h //= 2
            rows.append((f"conv{i}", (h, h, conv.out_channels)))
        return rows


class TemporalVideoDiscriminator(nn.Module):
    """3D convolutional critic over short frame windows.

    Spatial plan mirrors the image critic (three stride-2 stages, two
    stride-1 stages); the temporal axis is padded so a 3-frame input carries
    four temporal entries through every stage, ending at a
    HxWx1x4 spatio-temporal score map (printed convention of the
    architecture tables).
    """

    def __init__(self, config: VideoDiscConfig | None = None):
        super().__init__()
        self.config = config or VideoDiscConfig()
        w = self.config.widths
        self.convs = nn.ModuleList(
            [
                nn.Conv3d(self.config.in_channels, w[0], 4, stride=(1, 2, 2)),
                nn.Conv3d(w[0], w[1], 4, stride=(1, 2, 2)),
                nn.Conv3d(w[1], w[2], 4, stride=(1, 2, 2)),
                nn.Conv3d(w[2], w[3], 4, stride=1),
                nn.Conv3d(w[3], 1, 4, stride=1),
            ]
        )
        self.act = nn.LeakyReLU(self.config.leaky_slope)
        _seeded_init(self, self.config.leaky_slope, self.config.seed)

    def forward(self, frames: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
        """frames (B, 3, T, H, W) + mask (B, 1, H, W) -> scores (B, 1, 4, H/8, W/8)."""
        if frames.dim() != 5 or frames.shape[2] != self.config.temporal_extent:
            raise ValidationError(
                f"expected (B, 3, {self.config.temporal_extent}, H, W) frames, "
                f"got {tuple(frames.shape)}"
            )
        if frames.shape[-2:] != target_mask.shape[-2:]:
            raise ValidationError(
                f"mask size {tuple(target_mask.shape[-2:])} does not match "
                f"frames {tuple(frames.shape[-2:])}"
            )
        mask = target_mask.unsqueeze(2).expand(-1, -1, frames.shape[2], -1, -1)
        x = torch.cat([frames, mask], dim=1)
        for i, conv in enumerate(self.convs):
            spatial = (1, 1) if conv.stride[1] == 2 else (1, 2)
            # first stage widens time 3 -> 4, later stages keep 4
            temporal = (2, 2) if i == 0 else (1, 2)
            x = F.pad(x, (*spatial, *spatial, *temporal))
            x = self.act(conv(x))
        return x

    def layer_shapes(self, resolution: int = 512) -> list[tuple[str, tuple[int, ...]]]:
        """Rows in the printed table convention: input is (H, W, T, C), conv
        outputs are (H, W, C, T)."""
        rows = [("input", (resolution, resolution, self.config.temporal_extent, self.config.in_channels))]
        h = resolution
        t = self.config.temporal_extent
        for i, conv in enumerate(self.convs, start=1):
            if conv.stride[1] == 2:
                h //= 2
            t = t + 1 if i == 1 else t
            rows.append((f"conv{i}", (h, h, conv.out_channels, t)))
        return rows


def image_disc_forward(frame: Frame, target_mask: AgeMask, model: PatchImageDiscriminator) -> np.ndarray:
    """Score one frame under one target-age condition; returns an (h', w') map."""
    if (target_mask.height, target_mask.width) != (frame.height, frame.width):
        raise ValidationError("frame and mask sizes differ")
    x = frame_to_tensor(frame).unsqueeze(0)
    m = torch.from_numpy(target_mask.as_array()).unsqueeze(0).unsqueeze(0)
    with torch.no_grad():
        scores = model(x, m)
    return scores[0, 0].numpy()


def video_disc_forward(
    frames: list[Frame], target_mask: AgeMask, model: TemporalVideoDiscriminator
) -> np.ndarray:
    """Score a consecutive-frame window; returns an (h', w', 1, T) map."""
    if len(frames) != model.config.temporal_extent:
        raise ValidationError(
            f"expected exactly {model.config.temporal_extent} frames, got {len(frames)}"
        )
    for f in frames:
        if (target_mask.height, target_mask.width) != (f.height, f.width):
            raise ValidationError("frame and mask sizes differ")
    x = torch.stack([frame_to_tensor(f) for f in frames], dim=1).unsqueeze(0)
    m = torch.from_numpy(target_mask.as_array()).unsqueeze(0).unsqueeze(0)
    with torch.no_grad():
        scores = model(x, m)
    return scores[0].permute(2, 3, 0, 1).numpy()
