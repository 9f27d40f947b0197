"""Shared oracles for the test suite: finite differences and metric replays."""

from itertools import combinations

import numpy as np
import torch

from inade.core import sample_noise_bank, sample_replacement_rows
from inade.rng import derived_seed, torch_generator


def finite_difference_gradients(loss_fn, tensors, h=1e-6, max_entries=None, seed=0):
    """Central-difference gradients of a scalar loss w.r.t. each tensor.

    ``loss_fn`` must be a pure function of the current tensor values.
    When ``max_entries`` is set, a deterministic subsample of entries is
    probed per tensor and the returned dict maps tensor index ->
    (flat_indices, fd_grads).
    """
    results = {}
    rng = np.random.default_rng(seed)
    for t_idx, tensor in enumerate(tensors):
        flat = tensor.detach().reshape(-1)
        n = flat.numel()
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        grads = np.zeros(len(idx), dtype=np.float64)
        for k, i in enumerate(idx):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
            plus = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = orig - h
            minus = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = orig
            grads[k] = (plus - minus) / (2 * h)
        results[t_idx] = (idx, grads)
    return results


def relative_gradient_error(analytic: torch.Tensor, idx, fd: np.ndarray) -> float:
    """Max |analytic - fd| over probed entries, normalized by the fd scale."""
    ana = analytic.detach().reshape(-1).numpy()[idx]
    scale = max(np.abs(fd).max(), np.abs(ana).max(), 1e-8)
    return float(np.abs(ana - fd).max() / scale)


def replay_diversity_reference(model, dataset, resamples, root_seed, targets_fn,
                               distance_fn):
    """Naive enumerate-everything mirror of the region-diversity protocol.

    Replays the documented noise schedule, materializes every variant
    image, and accumulates masked distances with explicit Python loops.
    Returns (inside_mean, outside_mean).
    """
    inside_images, outside_images = [], []
    for idx, sample in enumerate(dataset):
        pair = sample.pair
        gen = torch_generator(derived_seed(root_seed, 2, idx))
        z = torch.randn(model.latent_channels, generator=gen)
        base = sample_noise_bank(pair.num_instances, model.noise_channels, gen)
        inside_targets, outside_targets = [], []
        for _, region, rows in targets_fn(pair):
            images = []
            for _ in range(resamples):
                rows_g, rows_b = sample_replacement_rows(
                    len(rows), model.noise_channels, gen)
                images.append(model.synthesize(pair, base.with_rows(rows, rows_g, rows_b), z))
            ins, outs = [], []
            for i, j in combinations(range(resamples), 2):
                ins.append(distance_fn(images[i], images[j], region))
                outs.append(distance_fn(images[i], images[j], ~region))
            inside_targets.append(sum(ins) / len(ins))
            outside_targets.append(sum(outs) / len(outs))
        inside_images.append(sum(inside_targets) / len(inside_targets))
        outside_images.append(sum(outside_targets) / len(outside_targets))
    return (sum(inside_images) / len(inside_images),
            sum(outside_images) / len(outside_images))


def loop_masked_mean_abs(a, b, mask):
    """Per-pixel loop oracle for the masked mean absolute distance."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    total, count = 0.0, 0
    for r in range(av.shape[1]):
        for c in range(av.shape[2]):
            if mask[r, c]:
                for ch in range(av.shape[0]):
                    total += abs(av[ch, r, c] - bv[ch, r, c])
                count += av.shape[0]
    return total / count if count else 0.0
