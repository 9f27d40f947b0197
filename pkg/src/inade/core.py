"""Instance-adaptive denormalization: noise banks, per-class modulation
distributions, per-layer noise transforms, and the normalization layer.

One noise bank is drawn per image and shared by every normalization layer
in a forward pass, which keeps instance styles consistent across layers.
Each layer maps the bank into its own channel depth with a bias-free
linear transform, turns the rows into per-instance scale/shift vectors
through the class-conditional affine parameters, broadcasts them onto the
pixel grid by instance lookup, and applies them after parameter-free
batch normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ClassOutOfRange, LabelOutOfRange, ShapeMismatch
from .labels import LabelPair


@dataclass
class NoiseBank:
    """Gaussian sample matrices for one image, one row per instance."""

    n_gamma: torch.Tensor
    n_beta: torch.Tensor
    seed: Optional[int] = None
    remapped: bool = False

    def __post_init__(self):
        if self.n_gamma.shape != self.n_beta.shape:
            raise ShapeMismatch(
                f"gamma/beta banks must share shape, got {tuple(self.n_gamma.shape)} "
                f"vs {tuple(self.n_beta.shape)}"
            )

    @property
    def num_instances(self) -> int:
        return self.n_gamma.shape[0]

    @property
    def channels(self) -> int:
        return self.n_gamma.shape[1]

    def clone(self) -> "NoiseBank":
        return replace(self, n_gamma=self.n_gamma.clone(), n_beta=self.n_beta.clone())

    def with_rows(self, labels: Sequence[int], rows_gamma: torch.Tensor,
                  rows_beta: torch.Tensor) -> "NoiseBank":
        """New bank with rows of the given 1-based instance labels replaced."""
        idx = torch.as_tensor([int(l) - 1 for l in labels], dtype=torch.long)
        if idx.numel() and (idx.min() < 0 or idx.max() >= self.num_instances):
            raise LabelOutOfRange(f"instance labels {list(labels)} outside [1, {self.num_instances}]")
        out = self.clone()
        out.n_gamma[idx] = rows_gamma
        out.n_beta[idx] = rows_beta
        return out


def sample_noise_bank(num_instances: int, channels: int,
                      generator: torch.Generator, seed: Optional[int] = None) -> NoiseBank:
    """Draw fresh standard-normal noise matrices for one image.

    Row order is gamma matrix first, then beta, so a seeded generator
    reproduces banks exactly.
    """
    if num_instances < 1 or channels < 1:
        raise ShapeMismatch(f"bank dims must be positive, got ({num_instances}, {channels})")
    n_gamma = torch.randn(num_instances, channels, generator=generator)
    n_beta = torch.randn(num_instances, channels, generator=generator)
    return NoiseBank(n_gamma=n_gamma, n_beta=n_beta, seed=seed, remapped=False)


def sample_replacement_rows(count: int, channels: int,
                            generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Fresh gamma/beta rows for redrawing part of a bank (gamma first)."""
    rows_gamma = torch.randn(count, channels, generator=generator)
    rows_beta = torch.randn(count, channels, generator=generator)
    return rows_gamma, rows_beta


class DistributionParams(nn.Module):
    """Learnable per-class affine transforms of the sampling noise.

    Scales start at one and shifts at zero, so the layer initially passes
    the transformed noise through unchanged.
    """

    def __init__(self, num_classes: int, channels: int):
        super().__init__()
        self.num_classes = num_classes
        self.channels = channels
        self.a_gamma = nn.Parameter(torch.ones(num_classes, channels))
        self.b_gamma = nn.Parameter(torch.zeros(num_classes, channels))
        self.a_beta = nn.Parameter(torch.ones(num_classes, channels))
        self.b_beta = nn.Parameter(torch.zeros(num_classes, channels))


class LayerTransform(nn.Module):
    """Bias-free linear maps taking bank rows to a layer's channel depth.

    Entries start Gaussian with std 1/sqrt(in_channels) so transformed
    rows keep roughly unit variance; no bias, so class shifts come only
    from the distribution parameters.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 init_generator: Optional[torch.Generator] = None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        scale = in_channels ** -0.5
        self.f_gamma = nn.Parameter(
            torch.randn(in_channels, out_channels, generator=init_generator) * scale)
        self.f_beta = nn.Parameter(
            torch.randn(in_channels, out_channels, generator=init_generator) * scale)


def transform_noise(t: LayerTransform, bank: NoiseBank) -> tuple[torch.Tensor, torch.Tensor]:
    """Map bank rows into the layer's channel depth; rows stay independent."""
    if bank.channels != t.in_channels:
        raise ShapeMismatch(
            f"bank has {bank.channels} channels but transform expects {t.in_channels}")
    return bank.n_gamma @ t.f_gamma, bank.n_beta @ t.f_beta


def modulate_instances(d: DistributionParams, g, n_hat_gamma: torch.Tensor,
                       n_hat_beta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-instance modulation rows: class scale times noise plus class shift.

    ``g`` lists each instance's 1-based semantic class.
    """
    g = torch.as_tensor(np.asarray(g), dtype=torch.long)
    if g.numel() == 0 or g.min() < 1 or g.max() > d.num_classes:
        raise ClassOutOfRange(f"class table values must lie in [1, {d.num_classes}]")
    if n_hat_gamma.shape != (g.numel(), d.channels):
        raise ShapeMismatch(
            f"expected noise rows of shape {(g.numel(), d.channels)}, "
            f"got {tuple(n_hat_gamma.shape)}")
    cls = g - 1
    gamma = d.a_gamma[cls] * n_hat_gamma + d.b_gamma[cls]
    beta = d.a_beta[cls] * n_hat_beta + d.b_beta[cls]
    return gamma, beta


def scatter_igs(per_instance: torch.Tensor, inst_grid) -> torch.Tensor:
    """Broadcast per-instance rows onto the pixel grid by label lookup.

    ``inst_grid`` is an integer (H, W) array of 1-based instance labels;
    the result is (C, H, W) with each pixel carrying its instance's row.
    """
    grid = torch.as_tensor(np.asarray(inst_grid), dtype=torch.long)
    if grid.numel() == 0:
        raise ShapeMismatch("instance grid is empty")
    if grid.min() < 1 or grid.max() > per_instance.shape[0]:
        raise LabelOutOfRange(
            f"instance grid labels must lie in [1, {per_instance.shape[0]}]")
    return per_instance[grid - 1].permute(2, 0, 1)


def inade_normalize(x: torch.Tensor, gamma_field: torch.Tensor, beta_field: torch.Tensor,
                    bn: nn.BatchNorm2d) -> torch.Tensor:
    """Normalize with parameter-free batch statistics, then scale and shift.

    Training mode uses mini-batch statistics and updates the running
    estimates; evaluation mode normalizes with the running estimates.
    """
    if x.shape != gamma_field.shape or x.shape != beta_field.shape:
        raise ShapeMismatch(
            f"fields {tuple(gamma_field.shape)} must match activations {tuple(x.shape)}")
    return gamma_field * bn(x) + beta_field


class INADE(nn.Module):
    """One instance-adaptive denormalization layer.

    forward() takes activations together with the per-element label pairs
    and noise banks (ragged instance counts are kept as lists).  The layer
    records the identity of the last bank it consumed so callers can assert
    that a single bank fed every layer of a network pass, and can capture
    the dense modulation fields for inspection.
    """

    def __init__(self, num_classes: int, channels: int, noise_channels: int,
                 eps: float = 1e-5, momentum: float = 0.1,
                 init_generator: Optional[torch.Generator] = None):
        super().__init__()
        self.dist = DistributionParams(num_classes, channels)
        self.transform = LayerTransform(noise_channels, channels, init_generator)
        self.bn = nn.BatchNorm2d(channels, eps=eps, momentum=momentum, affine=False)
        self.last_bank_ids: list[int] = []
        self.capture_fields = False
        self.captured: list[tuple[torch.Tensor, torch.Tensor]] = []

    def modulation_field(self, pair: LabelPair, bank: NoiseBank,
                         height: int, width: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Dense (C, H, W) scale/shift fields for one image."""
        n_hat_gamma, n_hat_beta = transform_noise(self.transform, bank)
        gamma, beta = modulate_instances(self.dist, pair.g, n_hat_gamma, n_hat_beta)
        inst = pair.resized_instances(height, width)
        return scatter_igs(gamma, inst), scatter_igs(beta, inst)

    def forward(self, x: torch.Tensor, pairs: Sequence[LabelPair],
                banks: Sequence[NoiseBank]) -> torch.Tensor:
        if x.ndim != 4:
            raise ShapeMismatch(f"expected (B, C, H, W) activations, got {tuple(x.shape)}")
        if len(pairs) != x.shape[0] or len(banks) != x.shape[0]:
            raise ShapeMismatch(
                f"batch of {x.shape[0]} needs {x.shape[0]} pairs and banks, "
                f"got {len(pairs)} and {len(banks)}")
        height, width = x.shape[2], x.shape[3]
        self.last_bank_ids = [id(b) for b in banks]
        # One matmul/index for the whole batch: per-row results equal the
        # per-image component calls since rows stay independent.
        cat_gamma = torch.cat([b.n_gamma for b in banks])
        cat_beta = torch.cat([b.n_beta for b in banks])
        cls = torch.cat([torch.as_tensor(p.g, dtype=torch.long) for p in pairs]) - 1
        if cls.min() < 0 or cls.max() >= self.dist.num_classes:
            raise ClassOutOfRange(
                f"class table values must lie in [1, {self.dist.num_classes}]")
        n_hat_gamma = cat_gamma @ self.transform.f_gamma
        n_hat_beta = cat_beta @ self.transform.f_beta
        gamma_rows = self.dist.a_gamma[cls] * n_hat_gamma + self.dist.b_gamma[cls]
        beta_rows = self.dist.a_beta[cls] * n_hat_beta + self.dist.b_beta[cls]
        offsets = np.cumsum([0] + [b.num_instances for b in banks[:-1]])
        grids = np.stack([p.resized_instances(height, width) for p in pairs])
        index = torch.as_tensor(grids + offsets.reshape(-1, 1, 1) - 1)
        gamma_field = gamma_rows[index].permute(0, 3, 1, 2)
        beta_field = beta_rows[index].permute(0, 3, 1, 2)
        if self.capture_fields:
            self.captured.append((gamma_field.detach().clone(), beta_field.detach().clone()))
        return inade_normalize(x, gamma_field, beta_field, self.bn)


def inade_layer_forward(layer: INADE, x: torch.Tensor, pair: LabelPair,
                        bank: NoiseBank) -> torch.Tensor:
    """Single-image (C, H, W) convenience wrapper around INADE.forward."""
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (C, H, W) activations, got {tuple(x.shape)}")
    return layer(x.unsqueeze(0), [pair], [bank]).squeeze(0)
