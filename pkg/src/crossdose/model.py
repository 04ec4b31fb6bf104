"""Encoder-decoder denoisers in three variants.

All variants share the same backbone: a U-Net style network with ``depth``
encoder levels (two 3x3 conv + batch norm + LeakyReLU per level, 2x2 max-pool
between levels, channels doubling), a mirrored decoder (nearest-neighbor x2
upsample + 3x3 conv, skip concatenation) and a final 1x1 conv to one channel.
Activations are LeakyReLU throughout so negative responses survive - the
residual target y - x is signed, and plain ReLU would clamp away exactly the
part the network must express.

Variants differ only in how the backbone output becomes the estimate:

* ``residual``       est = LeakyReLU_0.01(f(x) + x); f(x) is the predicted noise
* ``direct``         est = f(x)
* ``dose_embedded``  est = f([x, dose-channel]); the dose enters as a constant
                     extra input channel carrying the normalized log dose

The residual head's shallow 0.01 slope keeps estimates essentially nonnegative
while leaving a live gradient everywhere (no dead units: d head/dz is 1 or
0.01, never 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

VARIANTS = ("residual", "direct", "dose_embedded")

# Normalized log-dose: 0.01 -> 0.0, 0.50 -> 1.0.
_LOG_LO = math.log10(0.01)
_LOG_HI = math.log10(0.50)


def encode_dose(dose_fraction: float) -> float:
    if not 0 < dose_fraction <= 1:
        raise ValidationError(f"dose fraction {dose_fraction} outside (0, 1]")
    return (math.log10(dose_fraction) - _LOG_LO) / (_LOG_HI - _LOG_LO)


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "residual"
    depth: int = 3
    base_channels: int = 16
    internal_leaky_slope: float = 0.01
    head_leaky_slope: float = 0.01
    batch_norm: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.depth < 2:
            raise ValidationError("depth must be >= 2")
        if self.base_channels < 8:
            raise ValidationError("base_channels must be >= 8")
        if self.variant == "residual" and self.head_leaky_slope != 0.01:
            raise ValidationError("the residual head slope is fixed at 0.01")

    @property
    def input_channels(self) -> int:
        return 2 if self.variant == "dose_embedded" else 1


class _ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, slope, batch_norm):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(c_out) if batch_norm else nn.Identity()
        self.bn2 = nn.BatchNorm2d(c_out) if batch_norm else nn.Identity()
        self.slope = slope

    def forward(self, x):
        x = F.leaky_relu(self.bn1(self.conv1(x)), self.slope)
        return F.leaky_relu(self.bn2(self.conv2(x)), self.slope)


class DenoiserNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        chans = [spec.base_channels * 2**i for i in range(spec.depth)]
        slope = spec.internal_leaky_slope
        self.encoders = nn.ModuleList()
        c_in = spec.input_channels
        for c in chans:
            self.encoders.append(_ConvBlock(c_in, c, slope, spec.batch_norm))
            c_in = c
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for j in range(spec.depth - 1, 0, -1):
            self.upconvs.append(nn.Conv2d(chans[j], chans[j - 1], 3, padding=1))
            self.decoders.append(_ConvBlock(2 * chans[j - 1], chans[j - 1], slope, spec.batch_norm))
        self.head = nn.Conv2d(chans[0], 1, 1)

    def backbone(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, dec in zip(self.upconvs, self.decoders):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = dec(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor, dose: torch.Tensor | float | None = None) -> torch.Tensor:
        """Denoised estimate for a (B, 1, H, W) batch of low-dose slices."""
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValidationError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValidationError("input contains NaN or Inf values")
        spec = self.spec
        if spec.variant == "dose_embedded":
            if dose is None:
                raise ValidationError("dose_embedded variant requires a dose input")
            dose_t = torch.as_tensor(dose, dtype=x.dtype, device=x.device).reshape(-1)
            if dose_t.numel() == 1:
                dose_t = dose_t.expand(x.shape[0])
            if dose_t.numel() != x.shape[0]:
                raise ValidationError(f"dose batch {dose_t.numel()} != image batch {x.shape[0]}")
            channel = dose_t.view(-1, 1, 1, 1).expand(-1, 1, x.shape[2], x.shape[3])
            return self.backbone(torch.cat([x, channel], dim=1))
        if dose is not None:
            raise ValidationError(f"{spec.variant} variant takes no dose input")
        if spec.variant == "direct":
            return self.backbone(x)
        return F.leaky_relu(self.backbone(x) + x, spec.head_leaky_slope)

    def predict_noise(self, x: torch.Tensor) -> torch.Tensor:
        """The backbone output f(x) before adding x back; may be negative."""
        if self.spec.variant != "residual":
            raise ValidationError("predict_noise is only defined for the residual variant")
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValidationError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        return self.backbone(x)


def build(spec: ModelSpec, seed: int) -> DenoiserNet:
    """Construct and initialize the network; identical seeds give identical
    parameters, and direct/residual share backbone initialization exactly."""
    torch.manual_seed(seed)
    return DenoiserNet(spec)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def describe(spec: ModelSpec, seed: int = 0) -> str:
    """Layer table plus total parameter count."""
    model = build(spec, seed)
    lines = [f"variant={spec.variant} depth={spec.depth} base_channels={spec.base_channels} "
             f"batch_norm={spec.batch_norm}",
             f"{'layer':<28}{'shape':<24}{'params':>10}"]
    for name, p in model.named_parameters():
        lines.append(f"{name:<28}{str(tuple(p.shape)):<24}{p.numel():>10}")
    lines.append(f"{'total':<52}{count_parameters(model):>10}")
    return "\n".join(lines)
