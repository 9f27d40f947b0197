"""Quality and diversity evaluation.

Diversity metrics resample part of a noise bank and measure how much the
output changes inside and outside the resampled region: high specific
diversity with low outside diversity means the model localizes style
control.  Noise draws follow a documented schedule (per-image generator
seeded from the root seed; z, then the base bank, then replacement rows
per target in ascending order) so runs are reproducible and independent
reference implementations can replay them.

Perceptual distance and image embedding are pluggable; the defaults are
a region-normalized mean absolute pixel difference and a frozen
random-conv embedder, standing in for pretrained networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Protocol, Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import NoiseBank, sample_noise_bank, sample_replacement_rows
from .errors import ConfigInvalid, DegenerateSet, DimensionMismatch, NoInstances
from .labels import LabelPair, SemanticMask
from .rng import derived_seed


class SynthesisModel(Protocol):
    """What the diversity metrics need from a model handle."""

    noise_channels: int
    latent_channels: int

    def synthesize(self, pair: LabelPair, bank: NoiseBank, z: torch.Tensor) -> torch.Tensor:
        ...


class MeanAbsoluteDistance:
    """Region-normalized mean absolute pixel difference.

    The optional mask is a boolean (H, W) array; pixels outside it are
    ignored and the result is normalized by the masked pixel count, so
    small regions weigh the same as large ones.  An empty mask yields 0.
    """

    def __call__(self, a, b, mask: Optional[np.ndarray] = None) -> float:
        av = np.asarray(a.detach() if torch.is_tensor(a) else a, dtype=np.float64)
        bv = np.asarray(b.detach() if torch.is_tensor(b) else b, dtype=np.float64)
        if av.shape != bv.shape:
            raise DimensionMismatch(f"image shapes differ: {av.shape} vs {bv.shape}")
        diff = np.abs(av - bv)
        if mask is None:
            return float(diff.mean())
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != av.shape[-2:]:
            raise DimensionMismatch(f"mask shape {mask.shape} != image dims {av.shape[-2:]}")
        count = int(mask.sum())
        if count == 0:
            return 0.0
        return float(diff[..., mask].sum() / (count * av.shape[0]))


def _pair_mean(images: Sequence[torch.Tensor], distance,
               mask: Optional[np.ndarray]) -> float:
    scores = [distance(images[i], images[j], mask)
              for i, j in combinations(range(len(images)), 2)]
    return float(np.mean(scores))


def overall_diversity(model: SynthesisModel, dataset, distance=None,
                      groups: int = 10, pairs: int = 10, root_seed: int = 0,
                      pair_indices: Optional[Sequence[tuple[int, int]]] = None) -> float:
    """Mean pairwise distance between independently-noised result groups.

    Generates ``groups`` full result sets, picks ``pairs`` random distinct
    group pairs (or the given ``pair_indices``), and averages the image-wise
    distance over each chosen pair.
    """
    if groups < 2:
        raise ConfigInvalid("need at least two groups")
    distance = distance or MeanAbsoluteDistance()
    grouped = []
    for g in range(groups):
        images = []
        for i, sample in enumerate(dataset):
            gen = torch.Generator().manual_seed(derived_seed(root_seed, 0, g, i))
            z = torch.randn(model.latent_channels, generator=gen)
            bank = sample_noise_bank(sample.pair.num_instances, model.noise_channels, gen)
            images.append(model.synthesize(sample.pair, bank, z))
        grouped.append(images)
    if pair_indices is None:
        all_pairs = list(combinations(range(groups), 2))
        if pairs > len(all_pairs):
            raise ConfigInvalid(f"cannot draw {pairs} distinct pairs from {groups} groups")
        rng = np.random.default_rng(derived_seed(root_seed, 1))
        chosen = [all_pairs[k] for k in rng.choice(len(all_pairs), size=pairs, replace=False)]
    else:
        chosen = list(pair_indices)
    scores = []
    for ga, gb in chosen:
        per_image = [distance(a, b) for a, b in zip(grouped[ga], grouped[gb])]
        scores.append(float(np.mean(per_image)))
    return float(np.mean(scores))


def _instance_targets(pair: LabelPair):
    """(target id, region mask, bank rows) per instance, ascending."""
    return [(l, pair.inst.grid == l, [l]) for l in range(1, pair.num_instances + 1)]


def _class_targets(pair: LabelPair):
    """(target id, region mask, bank rows) per semantic class present."""
    out = []
    for c in np.unique(pair.mask.grid):
        rows = [l for l in range(1, pair.num_instances + 1) if pair.g[l - 1] == c]
        out.append((int(c), pair.mask.grid == c, rows))
    return out


def _region_diversity(model: SynthesisModel, dataset, distance, targets_fn,
                      resamples: int, root_seed: int):
    """Shared engine behind the instance- and class-level metrics.

    Per image: fix z and the base bank, then per target redraw only that
    target's rows ``resamples`` times and compare all unordered pairs of
    the resulting images inside and outside the target region.  Aggregates
    targets -> image -> dataset by plain means.
    """
    if len(dataset) == 0:
        raise NoInstances("dataset is empty")
    if resamples < 2:
        raise ConfigInvalid("resamples must be at least 2")
    distance = distance or MeanAbsoluteDistance()
    records = []
    for idx, sample in enumerate(dataset):
        pair = sample.pair
        gen = torch.Generator().manual_seed(derived_seed(root_seed, 2, idx))
        z = torch.randn(model.latent_channels, generator=gen)
        base = sample_noise_bank(pair.num_instances, model.noise_channels, gen)
        target_rows = []
        for target_id, region, rows in targets_fn(pair):
            images = []
            for _ in range(resamples):
                rows_g, rows_b = sample_replacement_rows(
                    len(rows), model.noise_channels, gen)
                images.append(model.synthesize(pair, base.with_rows(rows, rows_g, rows_b), z))
            inside = _pair_mean(images, distance, region)
            outside = _pair_mean(images, distance, ~region)
            target_rows.append({"target": target_id, "inside": inside, "outside": outside})
        records.append({
            "image": idx,
            "inside": float(np.mean([t["inside"] for t in target_rows])),
            "outside": float(np.mean([t["outside"] for t in target_rows])),
            "targets": target_rows,
        })
    inside = float(np.mean([r["inside"] for r in records]))
    outside = float(np.mean([r["outside"] for r in records]))
    return inside, outside, records


def instance_diversity(model: SynthesisModel, dataset, distance=None,
                       resamples: int = 3, root_seed: int = 0, detail: bool = False):
    """Specific/other diversity when resampling one instance at a time."""
    misd, moid, records = _region_diversity(
        model, dataset, distance, _instance_targets, resamples, root_seed)
    return (misd, moid, records) if detail else (misd, moid)


def class_diversity(model: SynthesisModel, dataset, distance=None,
                    resamples: int = 3, root_seed: int = 0, detail: bool = False):
    """Specific/other diversity when resampling one semantic class at a time.

    On degenerate pairs (one instance per used class) this consumes the
    same RNG stream as instance_diversity and returns identical numbers.
    """
    mcsd, mocd, records = _region_diversity(
        model, dataset, distance, _class_targets, resamples, root_seed)
    return (mcsd, mocd, records) if detail else (mcsd, mocd)


def miou_accu(pred: SemanticMask, gt: SemanticMask) -> tuple[float, float]:
    """Mean IoU over classes present in either mask, plus pixel accuracy."""
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if pred.num_classes != gt.num_classes:
        raise DimensionMismatch(
            f"class counts differ: {pred.num_classes} vs {gt.num_classes}")
    classes = np.union1d(np.unique(pred.grid), np.unique(gt.grid))
    ious = []
    for c in classes:
        p = pred.grid == c
        g = gt.grid == c
        union = np.logical_or(p, g).sum()
        ious.append(np.logical_and(p, g).sum() / union)
    accu = float((pred.grid == gt.grid).mean())
    return float(np.mean(ious)), accu


class PooledConvEmbedder(nn.Module):
    """Frozen random conv pyramid pooled to a feature vector.

    Stands in for a pretrained embedding network in the Frechet distance;
    any callable mapping (N, 3, H, W) images to an (N, D) array works.
    """

    def __init__(self, stages: Sequence[int] = (8, 16, 32), seed: int = 4321):
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

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            x = images
            pooled = []
            for conv in self.convs:
                x = F.leaky_relu(conv(x), 0.2)
                pooled.append(x.mean(dim=(2, 3)))
            return torch.cat(pooled, dim=1).numpy().astype(np.float64)


def matrix_sqrt(mat: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Real matrix square root with a diagonal jitter fallback."""
    root, _ = scipy.linalg.sqrtm(mat, disp=False)
    if not np.isfinite(root).all():
        jitter = eps * np.eye(mat.shape[0])
        root, _ = scipy.linalg.sqrtm(mat + jitter, disp=False)
    return np.real(root)


def fid(embedder, set_a, set_b) -> float:
    """Frechet distance between Gaussian fits of two embedded image sets."""
    images_a = torch.stack(list(set_a)) if not torch.is_tensor(set_a) else set_a
    images_b = torch.stack(list(set_b)) if not torch.is_tensor(set_b) else set_b
    if images_a.shape[0] < 2 or images_b.shape[0] < 2:
        raise DegenerateSet("each set needs at least two images")
    feats_a = np.asarray(embedder(images_a), dtype=np.float64)
    feats_b = np.asarray(embedder(images_b), dtype=np.float64)
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False)
    cov_b = np.cov(feats_b, rowvar=False)
    covmean = matrix_sqrt(cov_a @ cov_b)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * covmean))
    return value


@dataclass
class DiversityReport:
    """Aggregated evaluation results plus per-image breakdowns."""

    lpips_overall: Optional[float] = None
    misd: Optional[float] = None
    moid: Optional[float] = None
    mcsd: Optional[float] = None
    mocd: Optional[float] = None
    fid: Optional[float] = None
    groups: int = 0
    pairs: int = 0
    resamples: int = 0
    root_seed: int = 0
    num_images: int = 0
    instance_records: list = field(default_factory=list)
    class_records: list = field(default_factory=list)

    def summary_rows(self) -> list[tuple[str, float]]:
        rows = []
        for name in ("lpips_overall", "misd", "moid", "mcsd", "mocd", "fid"):
            value = getattr(self, name)
            if value is not None:
                rows.append((name, value))
        return rows


def evaluate_model(model: SynthesisModel, dataset, metrics=("lpips", "instance", "class", "fid"),
                   distance=None, embedder=None, groups: int = 10, pairs: int = 10,
                   resamples: int = 3, root_seed: int = 0) -> DiversityReport:
    """Run the requested metric families over a dataset."""
    report = DiversityReport(groups=groups, pairs=pairs, resamples=resamples,
                             root_seed=root_seed, num_images=len(dataset))
    distance = distance or MeanAbsoluteDistance()
    if "lpips" in metrics:
        report.lpips_overall = overall_diversity(
            model, dataset, distance, groups=groups, pairs=pairs, root_seed=root_seed)
    if "instance" in metrics:
        report.misd, report.moid, report.instance_records = instance_diversity(
            model, dataset, distance, resamples=resamples, root_seed=root_seed, detail=True)
    if "class" in metrics:
        report.mcsd, report.mocd, report.class_records = class_diversity(
            model, dataset, distance, resamples=resamples, root_seed=root_seed, detail=True)
    if "fid" in metrics:
        emb = embedder or PooledConvEmbedder()
        generated = []
        for i, sample in enumerate(dataset):
            gen = torch.Generator().manual_seed(derived_seed(root_seed, 3, i))
            z = torch.randn(model.latent_channels, generator=gen)
            bank = sample_noise_bank(sample.pair.num_instances, model.noise_channels, gen)
            generated.append(model.synthesize(sample.pair, bank, z))
        real = torch.stack([torch.as_tensor(s.image) for s in dataset])
        report.fid = fid(emb, real, torch.stack(generated))
    return report
