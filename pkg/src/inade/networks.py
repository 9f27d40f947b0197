"""Generator and discriminator architectures.

The generator starts from a latent vector, reshapes it onto a coarse
grid, and refines it through six residual blocks whose normalization
layers are instance-adaptive; 2x nearest upsampling precedes each block
(the second block's upsample is dropped for 2:1 aspect targets).  The
discriminator is a two-scale patch classifier over the image
concatenated with the one-hot semantic mask and the instance boundary
map, returning intermediate features for feature matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import INADE, NoiseBank
from .errors import ConfigInvalid, ShapeMismatch
from .labels import LabelPair, boundary_map, to_one_hot
from .remap import RemappingEncoder

_GEN_WIDTH_SCHEDULE = (16, 16, 8, 4, 2, 1, 1)


@dataclass
class ModelConfig:
    """Sizes and widths for generator, discriminator, and encoder."""

    height: int = 64
    width: int = 64
    num_classes: int = 4
    noise_channels: int = 64
    latent_channels: int = 256
    width_multiplier: float = 1.0
    gen_base_width: int = 16
    gen_max_width: int = 256
    disc_base_width: int = 64
    disc_max_width: int = 512
    disc_layers: int = 3
    disc_scales: int = 2
    encoder_widths: tuple = (32, 64, 128)
    spectral_norm: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self):
        if self.height < 1 or self.width < 1:
            raise ConfigInvalid(f"resolution must be positive, got {self.height}x{self.width}")
        if self.width == self.height:
            if self.height % 64:
                raise ConfigInvalid(f"square resolutions must be multiples of 64, got {self.height}")
        elif self.width == 2 * self.height:
            if self.height % 32:
                raise ConfigInvalid(
                    f"2:1 resolutions need height divisible by 32, got {self.height}")
        else:
            raise ConfigInvalid(
                f"aspect must be 1:1 or 1:2 (HxW), got {self.height}x{self.width}")
        if self.num_classes < 1:
            raise ConfigInvalid("num_classes must be at least 1")
        if self.noise_channels < 1 or self.latent_channels < 1:
            raise ConfigInvalid("channel counts must be positive")
        if self.width_multiplier <= 0:
            raise ConfigInvalid("width_multiplier must be positive")
        if self.disc_layers < 1 or self.disc_scales < 1:
            raise ConfigInvalid("discriminator depth/scale counts must be positive")

    def scaled(self, base: int) -> int:
        return max(1, int(round(base * self.width_multiplier)))

    def generator_widths(self) -> list[int]:
        """Channel counts entering each block, plus the final block output."""
        return [self.scaled(min(self.gen_max_width, self.gen_base_width * m))
                for m in _GEN_WIDTH_SCHEDULE]

    def upsample_flags(self) -> list[bool]:
        flags = [True] * 6
        if self.width == 2 * self.height:
            flags[1] = False
        return flags

    def initial_grid(self) -> tuple[int, int]:
        div = 2 ** sum(self.upsample_flags())
        return self.height // div, self.width // div


def _maybe_sn(module: nn.Module, enabled: bool) -> nn.Module:
    return nn.utils.spectral_norm(module) if enabled else module


class INADEResBlock(nn.Module):
    """Residual block with instance-adaptive normalization on every path."""

    def __init__(self, in_channels: int, out_channels: int, cfg: ModelConfig):
        super().__init__()
        mid = min(in_channels, out_channels)
        sn = cfg.spectral_norm

        def norm(ch):
            return INADE(cfg.num_classes, ch, cfg.noise_channels,
                         eps=cfg.bn_eps, momentum=cfg.bn_momentum)

        self.norm_0 = norm(in_channels)
        self.conv_0 = _maybe_sn(nn.Conv2d(in_channels, mid, 3, padding=1), sn)
        self.norm_1 = norm(mid)
        self.conv_1 = _maybe_sn(nn.Conv2d(mid, out_channels, 3, padding=1), sn)
        self.learned_skip = in_channels != out_channels
        if self.learned_skip:
            self.norm_s = norm(in_channels)
            self.conv_s = _maybe_sn(nn.Conv2d(in_channels, out_channels, 1, bias=False), sn)

    def forward(self, x, pairs, banks):
        dx = self.conv_0(F.leaky_relu(self.norm_0(x, pairs, banks), 0.2))
        dx = self.conv_1(F.leaky_relu(self.norm_1(dx, pairs, banks), 0.2))
        if self.learned_skip:
            skip = self.conv_s(self.norm_s(x, pairs, banks))
        else:
            skip = x
        return skip + dx


class Generator(nn.Module):
    """Latent + label pair + noise bank to an RGB image in [-1, 1]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.h0, self.w0 = cfg.initial_grid()
        widths = cfg.generator_widths()
        self.fc = nn.Linear(cfg.latent_channels, widths[0] * self.h0 * self.w0)
        self.ups = cfg.upsample_flags()
        self.blocks = nn.ModuleList(
            INADEResBlock(widths[i], widths[i + 1], cfg) for i in range(6))
        self.conv_img = _maybe_sn(nn.Conv2d(widths[6], 3, 3, padding=1), cfg.spectral_norm)

    def inade_layers(self) -> list[INADE]:
        return [m for m in self.modules() if isinstance(m, INADE)]

    def set_field_capture(self, enabled: bool):
        """Toggle recording of every layer's dense modulation fields."""
        for layer in self.inade_layers():
            layer.capture_fields = enabled
            layer.captured = []

    def collect_fields(self) -> list[list[tuple[torch.Tensor, torch.Tensor]]]:
        """Captured (gamma, beta) field stacks per layer since the last toggle."""
        return [layer.captured for layer in self.inade_layers()]

    def bank_trace(self) -> list[list[int]]:
        """Identities of the banks each layer consumed in the last forward."""
        return [layer.last_bank_ids for layer in self.inade_layers()]

    def forward(self, pairs: Sequence[LabelPair], banks: Sequence[NoiseBank],
                z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_channels:
            raise ShapeMismatch(
                f"z must be (B, {self.cfg.latent_channels}), got {tuple(z.shape)}")
        if len(pairs) != z.shape[0] or len(banks) != z.shape[0]:
            raise ShapeMismatch("pairs/banks must match the latent batch size")
        for pair, bank in zip(pairs, banks):
            if bank.num_instances != pair.num_instances:
                raise ShapeMismatch(
                    f"bank rows ({bank.num_instances}) != pair instances "
                    f"({pair.num_instances})")
        x = self.fc(z).view(z.shape[0], -1, self.h0, self.w0)
        for up, block in zip(self.ups, self.blocks):
            if up:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x, pairs, banks)
        x = self.conv_img(F.leaky_relu(x, 0.2))
        return torch.tanh(x)


def generator_forward(gen: Generator, pair: LabelPair, bank: NoiseBank,
                      z: torch.Tensor) -> torch.Tensor:
    """Single-image (3, H, W) forward pass."""
    return gen([pair], [bank], z.unsqueeze(0))[0]


class PatchDiscriminator(nn.Module):
    """Strided-conv patch classifier returning per-layer features."""

    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        sn = cfg.spectral_norm
        width = cfg.scaled(cfg.disc_base_width)
        max_width = cfg.scaled(cfg.disc_max_width)
        layers = [nn.ModuleList([
            _maybe_sn(nn.Conv2d(in_channels, width, 4, stride=2, padding=1), sn)])]
        for _ in range(1, cfg.disc_layers):
            prev, width = width, min(width * 2, max_width)
            layers.append(nn.ModuleList([
                _maybe_sn(nn.Conv2d(prev, width, 4, stride=2, padding=1), sn),
                nn.InstanceNorm2d(width, affine=False)]))
        prev, width = width, min(width * 2, max_width)
        layers.append(nn.ModuleList([
            _maybe_sn(nn.Conv2d(prev, width, 4, stride=1, padding=1), sn),
            nn.InstanceNorm2d(width, affine=False)]))
        self.stages = nn.ModuleList(layers)
        self.logit_conv = _maybe_sn(nn.Conv2d(width, 1, 4, stride=1, padding=1), sn)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            for op in stage:
                x = op(x)
            x = F.leaky_relu(x, 0.2)
            feats.append(x)
        feats.append(self.logit_conv(x))
        return feats


class MultiScaleDiscriminator(nn.Module):
    """Patch discriminators at full and 2x average-downsampled resolution."""

    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        self.in_channels = in_channels
        self.scales = nn.ModuleList(
            PatchDiscriminator(in_channels, cfg) for _ in range(cfg.disc_scales))
        self.feature_depth = cfg.disc_layers + 2

    def forward(self, x: torch.Tensor) -> list[list[torch.Tensor]]:
        outputs = []
        for i, disc in enumerate(self.scales):
            scaled = F.avg_pool2d(x, 2) if i else x
            outputs.append(disc(scaled))
            x = scaled
        return outputs


def conditioning_planes(pairs: Sequence[LabelPair],
                        dtype=torch.float32) -> torch.Tensor:
    """One-hot semantic planes plus the boundary channel, stacked per pair."""
    parts = []
    for pair in pairs:
        onehot = torch.as_tensor(
            to_one_hot(pair.mask.grid, pair.mask.num_classes).planes, dtype=dtype)
        edges = torch.as_tensor(boundary_map(pair.inst), dtype=dtype).unsqueeze(0)
        parts.append(torch.cat([onehot, edges], dim=0))
    return torch.stack(parts)


def discriminator_input(images: torch.Tensor, pairs: Sequence[LabelPair],
                        cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Concatenate image, one-hot semantic mask, and instance boundary map.

    ``cond`` may carry precomputed conditioning_planes to avoid rebuilding
    them when the same pairs are scored several times per step.
    """
    if images.ndim != 4 or images.shape[0] != len(pairs):
        raise ShapeMismatch(
            f"expected (B, 3, H, W) images matching {len(pairs)} pairs, "
            f"got {tuple(images.shape)}")
    for img, pair in zip(images, pairs):
        if tuple(img.shape[1:]) != pair.shape:
            raise ShapeMismatch(f"image dims {tuple(img.shape[1:])} != pair dims {pair.shape}")
    if cond is None:
        cond = conditioning_planes(pairs, dtype=images.dtype)
    return torch.cat([images, cond], dim=1)


def discriminator_forward(disc: MultiScaleDiscriminator, images: torch.Tensor,
                          pairs: Sequence[LabelPair]) -> list[list[torch.Tensor]]:
    """Run the conditional discriminator on images with their label pairs."""
    return disc(discriminator_input(images, pairs))


def parameter_count(module: nn.Module, convs_only: bool = False) -> int:
    if convs_only:
        from .remap import InstancePartialConv2d
        return sum(m.weight.numel() for m in module.modules()
                   if isinstance(m, (nn.Conv2d, InstancePartialConv2d)))
    return sum(p.numel() for p in module.parameters())


def build_default_models(cfg: ModelConfig):
    """Construct generator, discriminator, and remapping encoder for a config.

    Returns the three models plus a parameter-count summary dict.
    """
    cfg.validate()
    gen = Generator(cfg)
    disc_in = 3 + cfg.num_classes + 1
    disc = MultiScaleDiscriminator(disc_in, cfg)
    enc = RemappingEncoder(in_channels=3,
                           widths=tuple(cfg.scaled(w) for w in cfg.encoder_widths))
    summary = {
        "generator_params": parameter_count(gen),
        "discriminator_params": parameter_count(disc),
        "encoder_params": parameter_count(enc),
    }
    return gen, disc, enc, summary
