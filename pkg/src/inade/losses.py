"""Training objectives: hinge adversarial losses, feature matching,
perceptual distance over a pluggable extractor, and their weighted sum.

Losses over multi-scale feature lists average across scales so weight
settings keep their meaning if the scale count changes.  Layer indices
are 1-based; with ``fm_start=3`` on a 5-feature discriminator, layers
3..5 contribute.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigInvalid, IndexOutOfRange, ShapeMismatch


@dataclass
class LossWeights:
    """Weights and start layers of the generator objective."""

    lambda_fm: float = 10.0
    lambda_perc: float = 10.0
    lambda_kl: float = 0.05
    fm_start: int = 3
    perc_start: int = 3

    def __post_init__(self):
        if min(self.lambda_fm, self.lambda_perc, self.lambda_kl) < 0:
            raise ConfigInvalid("loss weights must be nonnegative")
        if self.fm_start < 1 or self.perc_start < 1:
            raise ConfigInvalid("start layer indices are 1-based and must be >= 1")


def hinge_d_loss(real_logits: Sequence[torch.Tensor],
                 fake_logits: Sequence[torch.Tensor]) -> torch.Tensor:
    """Discriminator hinge loss, averaged over patches then scales."""
    terms = [F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean()
             for r, f in zip(real_logits, fake_logits)]
    return torch.stack(terms).mean()


def hinge_g_loss(fake_logits: Sequence[torch.Tensor]) -> torch.Tensor:
    """Generator hinge loss: negated mean patch logit, averaged over scales."""
    return torch.stack([-f.mean() for f in fake_logits]).mean()


def feature_matching_loss(real_feats: Sequence[Sequence[torch.Tensor]],
                          fake_feats: Sequence[Sequence[torch.Tensor]],
                          fm_start: int = 3) -> torch.Tensor:
    """Mean absolute feature difference from layer ``fm_start`` onward.

    Real features are treated as constants, so no gradient reaches the
    discriminator through this term.
    """
    total = None
    for real_scale, fake_scale in zip(real_feats, fake_feats):
        if fm_start > len(real_scale):
            raise IndexOutOfRange(
                f"fm_start={fm_start} exceeds the {len(real_scale)} available layers")
        term = sum((fake - real.detach()).abs().mean()
                   for real, fake in zip(real_scale[fm_start - 1:], fake_scale[fm_start - 1:]))
        total = term if total is None else total + term
    return total / len(real_feats)


def perceptual_loss(extractor, real_img: torch.Tensor, fake_img: torch.Tensor,
                    perc_start: int = 3) -> torch.Tensor:
    """Mean absolute extractor-feature difference from layer ``perc_start`` on."""
    if real_img.shape != fake_img.shape:
        raise ShapeMismatch(
            f"image shapes differ: {tuple(real_img.shape)} vs {tuple(fake_img.shape)}")
    real_feats = extractor(real_img)
    fake_feats = extractor(fake_img)
    if perc_start > len(real_feats):
        raise IndexOutOfRange(
            f"perc_start={perc_start} exceeds the {len(real_feats)} available layers")
    return sum((fake - real.detach()).abs().mean()
               for real, fake in zip(real_feats[perc_start - 1:], fake_feats[perc_start - 1:]))


def total_generator_objective(adv, fm, perc, kl, weights: LossWeights = None):
    """Weighted generator objective from its four parts."""
    w = weights or LossWeights()
    return adv + w.lambda_fm * fm + w.lambda_perc * perc + w.lambda_kl * kl


class ConvPyramidExtractor(nn.Module):
    """Frozen random strided-conv pyramid standing in for a pretrained
    perceptual network.

    Weights come from a fixed seed and never train; gradients still flow
    to the input image.  Any callable mapping (B, 3, H, W) images to an
    ordered feature list can replace it.
    """

    def __init__(self, stages: Sequence[int] = (16, 32, 64, 128), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        prev = 3
        for width in stages:
            conv = nn.Conv2d(prev, width, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (prev * 9) ** -0.5)
                conv.bias.zero_()
            convs.append(conv)
            prev = width
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def feature_depth(self) -> int:
        return len(self.convs)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim == 3:
            x = x.unsqueeze(0)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats
