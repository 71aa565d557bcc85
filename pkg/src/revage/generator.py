"""Recurrent video re-aging generator.

Each time step consumes three age-masked neighbor frames plus the carried
hidden state and previous output frame, runs them through a shared U-Net,
and emits an additive delta image together with the next hidden state. The
output frame is the input frame plus its delta, clamped back to [-1, 1].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import AgeValue, Frame, MaskedFrame, VideoClip, as_age
from .errors import ConfigurationError, ValidationError

log = logging.getLogger(__name__)

# Binomial 3x3 anti-aliasing kernel: [1,2,1] (x) [1,2,1] / 16.
_BLUR = torch.tensor([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


@dataclass(frozen=True)
class GeneratorConfig:
    """Structural parameters of the recurrent block U-Net."""

    resolution: int = 512
    base_channels: int = 64
    hidden_channels: int = 64
    depth: int = 4
    leaky_slope: float = 0.2
    use_skips: bool = True
    zero_init_output: bool = False
    output_init_scale: float = 1.0  # <1 starts the generator near the identity map
    seed: int = 0

    def __post_init__(self) -> None:
        if self.resolution <= 0 or self.resolution % (1 << self.depth):
            raise ConfigurationError(
                f"resolution {self.resolution} is not divisible by 2^{self.depth}"
            )
        if self.base_channels < 1 or self.hidden_channels < 1 or self.depth < 1:
            raise ConfigurationError("channel counts and depth must be positive")

    @property
    def in_channels(self) -> int:
        # three 5-channel masked frames + hidden state + previous output
        return 3 * 5 + self.hidden_channels + 3

    @property
    def out_channels(self) -> int:
        return 3 + self.hidden_channels

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "base_channels": self.base_channels,
            "hidden_channels": self.hidden_channels,
            "depth": self.depth,
            "leaky_slope": self.leaky_slope,
            "use_skips": self.use_skips,
            "zero_init_output": self.zero_init_output,
            "output_init_scale": self.output_init_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        return cls(**data)


class Blur2d(nn.Module):
    """Depthwise binomial 3x3 blur, stride 1, same spatial size."""

    def __init__(self):
        super().__init__()
        self.register_buffer("kernel", _BLUR.view(1, 1, 3, 3))

    def forward(self, x):
        c = x.shape[1]
        return F.conv2d(x, self.kernel.expand(c, 1, 3, 3), padding=1, groups=c)


class MaxBlurPool(nn.Module):
    """Anti-aliased halving: binomial blur followed by a 2x2 max pool."""

    def __init__(self):
        super().__init__()
        self.blur = Blur2d()

    def forward(self, x):
        return F.max_pool2d(self.blur(x), 2)


class BlurUpsample(nn.Module):
    """2x nearest-neighbor upsample followed by a binomial blur."""

    def __init__(self):
        super().__init__()
        self.blur = Blur2d()

    def forward(self, x):
        return self.blur(F.interpolate(x, scale_factor=2, mode="nearest"))


class DownBlock(nn.Module):
    """Halve spatial size, double channels: pool + two 3x3 convolutions."""

    def __init__(self, channels: int, slope: float):
        super().__init__()
        self.pool = MaxBlurPool()
        self.conv1 = nn.Conv2d(channels, channels * 2, 3, padding=1)
        self.conv2 = nn.Conv2d(channels * 2, channels * 2, 3, padding=1)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        x = self.pool(x)
        x = self.act(self.conv1(x))
        return self.act(self.conv2(x))


class UpBlock(nn.Module):
    """Double spatial size, halve channels: upsample (+skip) + two 3x3 convolutions."""

    def __init__(self, channels: int, skip_channels: int, slope: float):
        super().__init__()
        self.skip_channels = skip_channels
        self.up = BlurUpsample()
        self.conv1 = nn.Conv2d(channels + skip_channels, channels // 2, 3, padding=1)
        self.conv2 = nn.Conv2d(channels // 2, channels // 2, 3, padding=1)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x, skip=None):
        x = self.up(x)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        x = self.act(self.conv1(x))
        return self.act(self.conv2(x))


class RecurrentUNet(nn.Module):
    """The shared per-time-step block: U-Net from 82-in to 67-out at defaults."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.stem1 = nn.Conv2d(config.in_channels, c, 3, padding=1)
        self.stem2 = nn.Conv2d(c, c, 3, padding=1)
        self.downs = nn.ModuleList(
            DownBlock(c << i, config.leaky_slope) for i in range(config.depth)
        )
        self.ups = nn.ModuleList()
        for i in reversed(range(config.depth)):
            channels = c << (i + 1)
            skip = (c << i) if config.use_skips else 0
            self.ups.append(UpBlock(channels, skip, config.leaky_slope))
        self.head = nn.Conv2d(c, config.out_channels, 1)
        self.act = nn.LeakyReLU(config.leaky_slope)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        """Fan-in-scaled normal init for every convolution, reproducibly seeded."""
        gen = torch.Generator().manual_seed(seed)
        gain = math.sqrt(2.0 / (1.0 + self.config.leaky_slope**2))
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.normal_(0.0, gain / math.sqrt(fan_in), generator=gen)
                    m.bias.zero_()
            if self.config.output_init_scale != 1.0:
                self.head.weight *= self.config.output_init_scale
            if self.config.zero_init_output:
                self.head.weight.zero_()
                self.head.bias.zero_()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, in_channels, H, W) -> (hidden (B, hidden, H, W), delta (B, 3, H, W))."""
        if x.shape[1] != self.config.in_channels:
            raise ValidationError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        if x.shape[-1] % (1 << self.config.depth) or x.shape[-2] % (1 << self.config.depth):
            raise ConfigurationError(
                f"spatial size {x.shape[-2]}x{x.shape[-1]} is not divisible by "
                f"2^{self.config.depth}"
            )
        h = self.act(self.stem1(x))
        h = self.act(self.stem2(h))
        skips = [h]
        for down in self.downs:
            h = down(h)
            skips.append(h)
        skips.pop()  # bottleneck is not its own skip
        for up in self.ups:
            h = up(h, skips.pop() if self.config.use_skips else None)
        y = self.head(h)
        delta = y[:, :3]
        hidden = self.act(y[:, 3:])
        return hidden, delta

    def layer_shapes(self, resolution: int | None = None) -> list[tuple[str, tuple[int, ...]]]:
        """Analytic per-layer output shapes, introspected from the live modules.

        Rows are (name, (H, W, C)) except the 4-tuple video input row. Used by
        the shape-conformance walker; a forward pass at any supported size
        must produce exactly these shapes.
        """
        r = self.config.resolution if resolution is None else resolution
        hc = self.config.hidden_channels
        rows: list[tuple[str, tuple[int, ...]]] = [
            ("input.video", (r, r, 3, 5)),
            ("input.reshape", (r, r, 15)),
            ("input.prev_hidden", (r, r, hc)),
            ("input.prev_output", (r, r, 3)),
            ("input.concat", (r, r, self.stem1.in_channels)),
            ("stem.conv1", (r, r, self.stem1.out_channels)),
            ("stem.conv2", (r, r, self.stem2.out_channels)),
        ]
        h = r
        for i, down in enumerate(self.downs, start=1):
            h //= 2
            rows.append((f"down{i}.pool", (h, h, down.conv1.in_channels)))
            rows.append((f"down{i}.conv1", (h, h, down.conv1.out_channels)))
            rows.append((f"down{i}.conv2", (h, h, down.conv2.out_channels)))
            rows.append((f"down{i}", (h, h, down.conv2.out_channels)))
        for i, up in enumerate(self.ups, start=1):
            h *= 2
            rows.append((f"up{i}.upsample", (h, h, up.conv1.in_channels - up.skip_channels)))
            rows.append((f"up{i}.conv1", (h, h, up.conv1.out_channels)))
            rows.append((f"up{i}.conv2", (h, h, up.conv2.out_channels)))
            rows.append((f"up{i}", (h, h, up.conv2.out_channels)))
        rows.append(("head", (h, h, self.head.out_channels)))
        rows.append(("output.delta", (h, h, 3)))
        rows.append(("output.hidden", (h, h, hc)))
        return rows


@dataclass
class RecurrentState:
    """Carried recurrence: hidden feature map + previous output frame."""

    hidden: torch.Tensor  # (1, hidden_channels, H, W)
    prev_output: torch.Tensor  # (1, 3, H, W)

    @classmethod
    def initial(cls, model: RecurrentUNet, first_frame: Frame | torch.Tensor) -> "RecurrentState":
        """Zero hidden state; previous output primed with the first input frame."""
        if isinstance(first_frame, Frame):
            prev = frame_to_tensor(first_frame).unsqueeze(0)
        else:
            prev = first_frame if first_frame.dim() == 4 else first_frame.unsqueeze(0)
        p = next(model.parameters())
        h, w = prev.shape[-2:]
        hidden = torch.zeros(1, model.config.hidden_channels, h, w, dtype=p.dtype)
        return cls(hidden=hidden, prev_output=prev.to(p.dtype))


def frame_to_tensor(frame: Frame) -> torch.Tensor:
    """HxWx3 [-1,1] numpy -> (3, H, W) float tensor."""
    return torch.from_numpy(np.ascontiguousarray(frame.data.transpose(2, 0, 1)))


def tensor_to_frame(tensor: torch.Tensor) -> Frame:
    arr = tensor.detach().squeeze(0) if tensor.dim() == 4 else tensor.detach()
    return Frame(arr.permute(1, 2, 0).to(torch.float32).numpy())


def masked_frame_to_tensor(masked: MaskedFrame) -> torch.Tensor:
    """(5, H, W) tensor in channel order frame -> input mask -> target mask."""
    return torch.from_numpy(np.ascontiguousarray(masked.as_array().transpose(2, 0, 1)))


def recurrent_block_forward(
    prev_frame: MaskedFrame,
    curr_frame: MaskedFrame,
    next_frame: MaskedFrame,
    state: RecurrentState,
    model: RecurrentUNet,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One recurrent step over explicit masked frames.

    Returns (hidden, delta) as (1, C, H, W) tensors. The concatenated input
    stacks the three masked frames, then the previous output frame, then the
    hidden state.
    """
    triple = [masked_frame_to_tensor(m) for m in (prev_frame, curr_frame, next_frame)]
    h, w = triple[0].shape[-2:]
    for name, t in (("state.hidden", state.hidden), ("state.prev_output", state.prev_output)):
        if t.shape[-2:] != (h, w):
            raise ValidationError(f"{name} is {tuple(t.shape[-2:])}, frames are {(h, w)}")
    p = next(model.parameters())
    x = torch.cat(
        [torch.cat(triple, dim=0).unsqueeze(0).to(p.dtype), state.prev_output, state.hidden],
        dim=1,
    )
    return model(x)


def compose_output(delta: np.ndarray | torch.Tensor, input_frame: Frame) -> Frame:
    """Output frame = input frame + delta, clamped to the valid pixel range."""
    if isinstance(delta, torch.Tensor):
        t = delta.detach().squeeze(0) if delta.dim() == 4 else delta.detach()
        delta = t.permute(1, 2, 0).to(torch.float32).numpy()
    delta = np.asarray(delta, dtype=np.float32)
    if delta.shape != input_frame.data.shape:
        raise ValidationError(
            f"delta shape {delta.shape} does not match frame {input_frame.data.shape}"
        )
    return Frame(np.clip(delta + input_frame.data, -1.0, 1.0))


def neighbor_indices(frame_count: int, interval: int) -> list[tuple[int, int, int]]:
    """0-based (prev, curr, next) index triples with boundary clamping."""
    if interval < 1:
        raise ValidationError(f"interval must be >= 1, got {interval}")
    last = frame_count - 1
    return [(max(t - interval, 0), t, min(t + interval, last)) for t in range(frame_count)]


def _masked_sequence(
    frames: torch.Tensor, input_age: AgeValue, target_age: AgeValue
) -> torch.Tensor:
    """(N, 3, H, W) -> (N, 5, H, W) with constant age planes appended."""
    n, _, h, w = frames.shape
    planes = frames.new_empty(n, 2, h, w)
    planes[:, 0] = input_age.normalized()
    planes[:, 1] = target_age.normalized()
    return torch.cat([frames, planes], dim=1)


def rollout(
    model: RecurrentUNet,
    frames: torch.Tensor,
    input_age: AgeValue | float,
    target_age: AgeValue | float,
    interval: int = 1,
) -> torch.Tensor:
    """Differentiable re-aging pass over an (N, 3, H, W) frame tensor.

    The recurrent state threads through frames in temporal order; neighbor
    indices clamp at the clip boundaries. Gradients flow to the model
    parameters, so this is the training path; use :func:`generate_video`
    for inference over clips.
    """
    input_age, target_age = as_age(input_age), as_age(target_age)
    n = frames.shape[0]
    if n < 1:
        raise ValidationError("need at least one frame")
    if interval >= n:
        log.warning(
            "frame interval %d >= clip length %d; all neighbors clamp to the boundaries",
            interval,
            n,
        )
    masked = _masked_sequence(frames, input_age, target_age)
    hidden = frames.new_zeros(1, model.config.hidden_channels, *frames.shape[-2:])
    prev = frames[0:1]
    outputs = []
    for p, t, nx in neighbor_indices(n, interval):
        x = torch.cat(
            [masked[p : p + 1], masked[t : t + 1], masked[nx : nx + 1], prev, hidden], dim=1
        )
        hidden, delta = model(x)
        out = (delta + frames[t : t + 1]).clamp(-1.0, 1.0)
        outputs.append(out)
        prev = out
    return torch.cat(outputs, dim=0)


def generate_video(
    model: RecurrentUNet,
    clip: VideoClip,
    input_age: AgeValue | float,
    target_age: AgeValue | float,
    interval: int = 1,
) -> VideoClip:
    """Re-age a whole clip to the target age; returns a clip of equal length."""
    frames = torch.from_numpy(clip.as_array().transpose(0, 3, 1, 2).copy())
    p = next(model.parameters())
    with torch.no_grad():
        out = rollout(model, frames.to(p.dtype), input_age, target_age, interval)
    arrays = out.to(torch.float32).numpy().transpose(0, 2, 3, 1)
    return replace(
        clip,
        frames=tuple(Frame(a) for a in arrays),
        apparent_age=as_age(target_age),
    )
