"""Reference-guided noise remapping.

A U-shaped encoder turns a reference image into four dense perturbation
maps (log-variance and shift for each noise branch).  Every spatial
operator in the encoder is masked by the instance map, so a pixel's
output can only ever depend on reference pixels of its own instance;
cross-instance independence is a property of the architecture rather
than something training has to learn.  Instance average pooling reduces
the maps to per-instance scale/shift parameters that remap the noise
bank, and a closed-form KL term keeps the remapped noise close to the
standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import NoiseBank
from .errors import ShapeMismatch
from .labels import LabelPair, resize_nearest


def _as_instance_tensor(inst) -> torch.Tensor:
    grid = torch.as_tensor(np.asarray(inst), dtype=torch.long)
    if grid.ndim != 2:
        raise ShapeMismatch(f"instance grid must be 2-D, got shape {tuple(grid.shape)}")
    return grid


def instance_partial_conv(x: torch.Tensor, inst, weight: torch.Tensor,
                          bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Convolution restricted to the center pixel's instance.

    At each output pixel the window is masked to pixels sharing the
    center's instance label and the sum is rescaled by
    (kernel size / valid count), so other instances contribute exactly
    zero and the response magnitude stays comparable across region
    shapes.  Bias, when given, is added after rescaling.
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (C, H, W) input, got {tuple(x.shape)}")
    if weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeMismatch(
            f"weight {tuple(weight.shape)} incompatible with {x.shape[0]} input channels")
    kh, kw = weight.shape[2], weight.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"kernel dims must be odd, got {(kh, kw)}")
    grid = _as_instance_tensor(inst)
    if grid.shape != x.shape[1:]:
        raise ShapeMismatch(f"instance grid {tuple(grid.shape)} != spatial dims {tuple(x.shape[1:])}")

    num_instances = int(grid.max())
    onehot = F.one_hot(grid - 1, num_instances).permute(2, 0, 1).to(x.dtype)  # (L, H, W)
    pad = (kh // 2, kw // 2)

    # Instances become the batch axis: conv the masked copies all at once.
    masked = x.unsqueeze(0) * onehot.unsqueeze(1)  # (L, C, H, W)
    summed = F.conv2d(masked, weight, bias=None, padding=pad)  # (L, Cout, H, W)
    valid = F.conv2d(onehot.unsqueeze(1), torch.ones(1, 1, kh, kw, dtype=x.dtype),
                     padding=pad)  # (L, 1, H, W)
    scale = (kh * kw) / valid.clamp(min=1.0)
    out = (summed * scale * onehot.unsqueeze(1)).sum(dim=0)
    if bias is not None:
        out = out + bias.view(-1, 1, 1)
    return out


class InstancePartialConv2d(nn.Module):
    """Learnable instance-masked convolution (same padding, odd kernel)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        ref = nn.Conv2d(in_channels, out_channels, kernel_size)
        self.weight = nn.Parameter(ref.weight.detach().clone())
        self.bias = nn.Parameter(ref.bias.detach().clone())

    def forward(self, x: torch.Tensor, inst) -> torch.Tensor:
        return instance_partial_conv(x, inst, self.weight, self.bias)


def instance_masked_downsample(x: torch.Tensor, inst, factor: int = 2):
    """Average-pool only pixels whose instance matches the window center.

    Centers are defined by the nearest-neighbour downsampled instance map;
    returns the pooled features together with that map.
    """
    grid = _as_instance_tensor(inst)
    if x.ndim != 3 or grid.shape != x.shape[1:]:
        raise ShapeMismatch(f"instance grid {tuple(grid.shape)} != spatial dims {tuple(x.shape[1:])}")
    h, w = grid.shape
    if h % factor or w % factor:
        raise ShapeMismatch(f"dims {(h, w)} not divisible by factor {factor}")
    small = torch.as_tensor(
        resize_nearest(grid.numpy(), (h // factor, w // factor)), dtype=torch.long)
    # Window pixels matching the center's instance.
    center = small.repeat_interleave(factor, 0).repeat_interleave(factor, 1)
    match = (grid == center).to(x.dtype)
    num = F.avg_pool2d((x * match).unsqueeze(0), factor).squeeze(0)
    den = F.avg_pool2d(match.unsqueeze(0).unsqueeze(0), factor).squeeze(0).squeeze(0)
    return num / den.clamp(min=1.0 / (factor * factor)), small


def instance_masked_upsample(x: torch.Tensor, inst, factor: int = 2):
    """Nearest replication of features and instance map."""
    grid = _as_instance_tensor(inst)
    if x.ndim != 3 or grid.shape != x.shape[1:]:
        raise ShapeMismatch(f"instance grid {tuple(grid.shape)} != spatial dims {tuple(x.shape[1:])}")
    up = x.repeat_interleave(factor, 1).repeat_interleave(factor, 2)
    up_grid = grid.repeat_interleave(factor, 0).repeat_interleave(factor, 1)
    return up, up_grid


def instance_masked_resample(x: torch.Tensor, inst, direction: str, factor: int = 2):
    """Dispatch to the masked down- or upsampling operator."""
    if direction == "down":
        return instance_masked_downsample(x, inst, factor)
    if direction == "up":
        return instance_masked_upsample(x, inst, factor)
    raise ShapeMismatch(f"direction must be 'down' or 'up', got {direction!r}")


def instance_average_pool(map2d: torch.Tensor, inst) -> torch.Tensor:
    """Mean of a scalar map over each instance's pixels (index l-1 = label l)."""
    grid = _as_instance_tensor(inst)
    if map2d.shape != grid.shape:
        raise ShapeMismatch(f"map shape {tuple(map2d.shape)} != grid shape {tuple(grid.shape)}")
    num_instances = int(grid.max())
    flat = grid.reshape(-1) - 1
    sums = torch.zeros(num_instances, dtype=map2d.dtype).index_add(0, flat, map2d.reshape(-1))
    counts = torch.zeros(num_instances, dtype=map2d.dtype).index_add(
        0, flat, torch.ones_like(map2d.reshape(-1)))
    return sums / counts


@dataclass
class PerturbationMaps:
    """Dense per-pixel remapping parameters; s maps hold log-variance."""

    s_gamma: torch.Tensor
    b_gamma: torch.Tensor
    s_beta: torch.Tensor
    b_beta: torch.Tensor


@dataclass
class PerturbationSet:
    """Per-instance remapping parameters; scales are exp(s/2), hence positive."""

    a_gamma: torch.Tensor
    b_gamma: torch.Tensor
    a_beta: torch.Tensor
    b_beta: torch.Tensor

    @property
    def num_instances(self) -> int:
        return self.a_gamma.shape[0]

    @staticmethod
    def identity(num_instances: int) -> "PerturbationSet":
        one = torch.ones(num_instances)
        zero = torch.zeros(num_instances)
        return PerturbationSet(a_gamma=one, b_gamma=zero,
                               a_beta=one.clone(), b_beta=zero.clone())


class _BatchGeometry:
    """Per-level instance masks shared by one batched encoder pass.

    For every pyramid level this precomputes, per element, the instance
    one-hot planes, the partial-conv renormalization field, and the
    center-match mask used by masked down/upsampling, all concatenated
    along the instance axis so each stage runs as a single conv call.
    """

    def __init__(self, pairs: Sequence[LabelPair], levels: int, kernel: int, dtype):
        self.kernel = kernel
        self.onehots = []    # per level: (sum L, 1, H, W)
        self.scales = []     # per level: (sum L, 1, H, W)
        self.splits = []     # per level: instance count per element
        self.matches = []    # per level boundary j -> j+1: (B, 1, H_j, W_j)
        grids = [torch.as_tensor(p.inst.grid, dtype=torch.long) for p in pairs]
        pad = kernel // 2
        ones = torch.ones(1, 1, kernel, kernel, dtype=dtype)
        for level in range(levels + 1):
            onehot = torch.cat([
                F.one_hot(g - 1, int(g.max())).permute(2, 0, 1).to(dtype) for g in grids
            ]).unsqueeze(1)
            valid = F.conv2d(onehot, ones, padding=pad)
            self.onehots.append(onehot)
            self.scales.append((kernel * kernel) / valid.clamp(min=1.0))
            self.splits.append([int(g.max()) for g in grids])
            if level < levels:
                small = [torch.as_tensor(
                    resize_nearest(g.numpy(), (g.shape[0] // 2, g.shape[1] // 2)),
                    dtype=torch.long) for g in grids]
                center = torch.stack([
                    s.repeat_interleave(2, 0).repeat_interleave(2, 1) for s in small])
                match = (torch.stack(grids) == center).to(dtype).unsqueeze(1)
                self.matches.append(match)
                grids = small

    def conv(self, x: torch.Tensor, level: int, weight: torch.Tensor,
             bias: torch.Tensor) -> torch.Tensor:
        onehot = self.onehots[level]
        masked = torch.cat([
            xi.unsqueeze(0) * oh for xi, oh in zip(x, onehot.split(self.splits[level]))])
        summed = F.conv2d(masked, weight, bias=None, padding=self.kernel // 2)
        per_inst = summed * self.scales[level] * onehot
        return torch.stack([seg.sum(dim=0)
                            for seg in per_inst.split(self.splits[level])]) + bias.view(-1, 1, 1)

    def downsample(self, x: torch.Tensor, level: int) -> torch.Tensor:
        match = self.matches[level]
        num = F.avg_pool2d(x * match, 2)
        den = F.avg_pool2d(match, 2)
        return num / den.clamp(min=0.25)

    def upsample(self, x: torch.Tensor, level: int) -> torch.Tensor:
        up = F.interpolate(x, scale_factor=2, mode="nearest")
        return up * self.matches[level]


class RemappingEncoder(nn.Module):
    """U-shaped instance-masked encoder producing the four perturbation maps.

    ``widths`` gives the feature depth per pyramid level and implicitly the
    number of down/up levels; the bottom level reuses the last width.  All
    convolutions are instance partial convolutions; downsampling averages
    within the center instance and upsampled coarse features are zeroed
    wherever the coarse-level instance disagrees with the finer map, so no
    path mixes instances.
    """

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (32, 64, 128),
                 kernel_size: int = 3, leak: float = 0.2):
        super().__init__()
        if not widths:
            raise ShapeMismatch("encoder needs at least one level width")
        self.widths = tuple(int(w) for w in widths)
        self.leak = leak
        self.levels = len(self.widths)
        self.stem = InstancePartialConv2d(in_channels, self.widths[0], kernel_size)
        downs = []
        chain = list(self.widths) + [self.widths[-1]]
        for lo, hi in zip(chain[:-1], chain[1:]):
            downs.append(InstancePartialConv2d(lo, hi, kernel_size))
        self.down_convs = nn.ModuleList(downs)
        ups = []
        for level in reversed(range(self.levels)):
            skip = self.widths[level]
            above = chain[level + 1]
            ups.append(InstancePartialConv2d(above + skip, skip, kernel_size))
        self.up_convs = nn.ModuleList(ups)
        self.head = InstancePartialConv2d(self.widths[0], 4, kernel_size)

    def forward(self, reference: torch.Tensor, pair: LabelPair) -> PerturbationMaps:
        if reference.ndim != 3:
            raise ShapeMismatch(f"reference must be (C, H, W), got {tuple(reference.shape)}")
        h, w = reference.shape[1:]
        if (h, w) != pair.shape:
            raise ShapeMismatch(f"reference dims {(h, w)} != label pair dims {pair.shape}")
        div = 2 ** self.levels
        if h % div or w % div:
            raise ShapeMismatch(f"dims {(h, w)} must be divisible by {div} for {self.levels} levels")

        grid = torch.as_tensor(pair.inst.grid, dtype=torch.long)
        x = F.leaky_relu(self.stem(reference, grid), self.leak)
        skips = [(x, grid)]
        for conv in self.down_convs:
            x, grid = instance_masked_downsample(x, grid, 2)
            x = F.leaky_relu(conv(x, grid), self.leak)
            skips.append((x, grid))
        x, grid = skips.pop()
        for conv in self.up_convs:
            skip_x, skip_grid = skips.pop()
            x, up_grid = instance_masked_upsample(x, grid, 2)
            # Small instances can vanish at coarse levels; drop coarse features
            # whose provenance disagrees with the finer map.
            x = x * (up_grid == skip_grid).to(x.dtype)
            grid = skip_grid
            x = F.leaky_relu(conv(torch.cat([x, skip_x], dim=0), grid), self.leak)
        maps = self.head(x, grid)
        return PerturbationMaps(s_gamma=maps[0], b_gamma=maps[1],
                                s_beta=maps[2], b_beta=maps[3])

    def forward_batch(self, images: torch.Tensor,
                      pairs: Sequence[LabelPair]) -> list[PerturbationMaps]:
        """Batched equivalent of forward(), one conv call per stage.

        Instance counts vary per element, so masked copies of all elements
        are concatenated along the instance axis for each convolution.
        """
        if images.ndim != 4 or images.shape[0] != len(pairs):
            raise ShapeMismatch(
                f"expected (B, C, H, W) images matching {len(pairs)} pairs, "
                f"got {tuple(images.shape)}")
        geo = _BatchGeometry(pairs, self.levels, kernel=self.stem.weight.shape[2],
                             dtype=images.dtype)
        x = F.leaky_relu(geo.conv(images, 0, self.stem.weight, self.stem.bias), self.leak)
        skips = [x]
        for level, conv in enumerate(self.down_convs):
            x = geo.downsample(x, level)
            x = F.leaky_relu(geo.conv(x, level + 1, conv.weight, conv.bias), self.leak)
            skips.append(x)
        x = skips.pop()
        for step, conv in enumerate(self.up_convs):
            level = self.levels - 1 - step
            skip_x = skips.pop()
            x = geo.upsample(x, level)
            x = F.leaky_relu(
                geo.conv(torch.cat([x, skip_x], dim=1), level, conv.weight, conv.bias),
                self.leak)
        maps = geo.conv(x, 0, self.head.weight, self.head.bias)
        return [PerturbationMaps(s_gamma=m[0], b_gamma=m[1], s_beta=m[2], b_beta=m[3])
                for m in maps]


def encode_reference(encoder: RemappingEncoder, reference: torch.Tensor,
                     pair: LabelPair) -> PerturbationMaps:
    """Run the encoder on a reference image in [-1, 1]."""
    return encoder(reference, pair)


def build_perturbation_set(maps: PerturbationMaps, inst) -> PerturbationSet:
    """Pool each map per instance; scales come from exp(s/2)."""
    return PerturbationSet(
        a_gamma=torch.exp(0.5 * instance_average_pool(maps.s_gamma, inst)),
        b_gamma=instance_average_pool(maps.b_gamma, inst),
        a_beta=torch.exp(0.5 * instance_average_pool(maps.s_beta, inst)),
        b_beta=instance_average_pool(maps.b_beta, inst),
    )


def remap_noise(bank: NoiseBank, ps: PerturbationSet) -> NoiseBank:
    """Affinely perturb each bank row by its instance's scale and shift."""
    if ps.num_instances != bank.num_instances:
        raise ShapeMismatch(
            f"perturbation set covers {ps.num_instances} instances, "
            f"bank has {bank.num_instances}")
    return NoiseBank(
        n_gamma=ps.a_gamma.unsqueeze(1) * bank.n_gamma + ps.b_gamma.unsqueeze(1),
        n_beta=ps.a_beta.unsqueeze(1) * bank.n_beta + ps.b_beta.unsqueeze(1),
        seed=bank.seed,
        remapped=True,
    )


def kl_loss(ps: PerturbationSet) -> torch.Tensor:
    """Closed-form divergence of the remapped noise from the standard normal.

    Per instance and branch KL(N(b, a^2) || N(0, 1)) = 0.5 (a^2 + b^2 - 1
    - ln a^2); branch means over instances are combined with a 0.5 factor.
    """
    def branch(a, b):
        return (0.5 * (a * a + b * b - 1.0 - torch.log(a * a))).mean()

    return 0.5 * (branch(ps.a_gamma, ps.b_gamma) + branch(ps.a_beta, ps.b_beta))
