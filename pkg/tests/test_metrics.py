from itertools import combinations

import numpy as np
import pytest
import torch

from helpers import loop_masked_mean_abs, replay_diversity_reference

from inade.core import sample_noise_bank, sample_replacement_rows
from inade.data import Sample
from inade.errors import ConfigInvalid, DegenerateSet, DimensionMismatch, NoInstances
from inade.labels import (
    InstanceMap,
    SemanticMask,
    degenerate_instances,
    validate_pair,
)
from inade.metrics import (
    MeanAbsoluteDistance,
    PooledConvEmbedder,
    _class_targets,
    _instance_targets,
    class_diversity,
    derived_seed,
    fid,
    instance_diversity,
    matrix_sqrt,
    miou_accu,
    overall_diversity,
)
from inade.rng import torch_generator


def make_pair(inst_grid, g):
    inst_grid = np.asarray(inst_grid)
    mask = np.asarray(g)[inst_grid - 1]
    return validate_pair(SemanticMask(mask, int(max(g))),
                         InstanceMap(inst_grid, int(inst_grid.max())))


def grid_8x8():
    grid = np.ones((8, 8), dtype=int)
    grid[0:4, 0:5] = 2
    grid[5:8, 5:8] = 3
    return grid


def dataset_of(pairs):
    return [Sample(image=np.zeros((3,) + p.shape, dtype=np.float32), pair=p)
            for p in pairs]


class ConstantModel:
    """Ignores all noise; output is a fixed image per pair."""

    noise_channels = 4
    latent_channels = 6

    def synthesize(self, pair, bank, z):
        return torch.zeros(3, *pair.shape)


class BankEchoModel:
    """Paints the whole image with the mean of the full gamma bank."""

    noise_channels = 4
    latent_channels = 6

    def synthesize(self, pair, bank, z):
        return torch.full((3,) + pair.shape, float(bank.n_gamma.mean()))


class PainterModel:
    """Colors each instance region with the mean of its gamma bank row."""

    noise_channels = 4
    latent_channels = 6

    def synthesize(self, pair, bank, z):
        values = bank.n_gamma.mean(dim=1)
        field = values[torch.as_tensor(pair.inst.grid, dtype=torch.long) - 1]
        return field.unsqueeze(0).expand(3, -1, -1).clone()


class TestDistance:
    def test_axioms(self):
        d = MeanAbsoluteDistance()
        a = torch.rand(3, 5, 5, generator=torch_generator(0))
        b = torch.rand(3, 5, 5, generator=torch_generator(1))
        assert d(a, a) == 0.0
        assert d(a, b) == d(b, a)
        assert d(a, b) >= 0.0

    def test_mask_locality(self):
        d = MeanAbsoluteDistance()
        a = torch.rand(3, 6, 6, generator=torch_generator(2))
        b = torch.rand(3, 6, 6, generator=torch_generator(3))
        mask = np.zeros((6, 6), dtype=bool)
        mask[:3] = True
        before = d(a, b, mask)
        b2 = b.clone()
        b2[:, ~torch.as_tensor(mask)] += 100.0
        assert d(a, b2, mask) == before

    def test_region_normalization_matches_loop(self):
        d = MeanAbsoluteDistance()
        rng = np.random.default_rng(4)
        a = rng.normal(size=(3, 7, 7))
        b = rng.normal(size=(3, 7, 7))
        mask = rng.random((7, 7)) < 0.4
        assert abs(d(a, b, mask) - loop_masked_mean_abs(a, b, mask)) < 1e-12

    def test_empty_mask_is_zero(self):
        d = MeanAbsoluteDistance()
        a = torch.rand(3, 4, 4)
        assert d(a, a + 1, np.zeros((4, 4), dtype=bool)) == 0.0


class TestOverallDiversity:
    def test_constant_model_scores_zero(self):
        data = dataset_of([make_pair(grid_8x8(), [1, 2, 3])] * 2)
        score = overall_diversity(ConstantModel(), data, groups=3, pairs=2, root_seed=1)
        assert score == 0.0

    def test_bank_echo_closed_form(self):
        # replay the documented draw schedule and compute the expected score
        model = BankEchoModel()
        pairs = [make_pair(grid_8x8(), [1, 2, 3]),
                 make_pair(np.ones((8, 8), dtype=int), [2])]
        data = dataset_of(pairs)
        groups, root = 3, 7
        chosen = [(0, 1), (0, 2), (1, 2)]
        score = overall_diversity(model, data, groups=groups, root_seed=root,
                                  pair_indices=chosen)
        values = np.zeros((groups, len(data)))
        for g in range(groups):
            for i, sample in enumerate(data):
                gen = torch_generator(derived_seed(root, 0, g, i))
                torch.randn(model.latent_channels, generator=gen)
                bank = sample_noise_bank(sample.pair.num_instances,
                                         model.noise_channels, gen)
                values[g, i] = float(bank.n_gamma.mean())
        expected = np.mean([np.abs(values[a] - values[b]).mean() for a, b in chosen])
        assert abs(score - expected) < 1e-7

    def test_pair_order_invariance(self):
        model = BankEchoModel()
        data = dataset_of([make_pair(grid_8x8(), [1, 2, 3])])
        a = overall_diversity(model, data, groups=4, root_seed=3,
                              pair_indices=[(0, 1), (2, 3), (1, 2)])
        b = overall_diversity(model, data, groups=4, root_seed=3,
                              pair_indices=[(2, 1), (3, 2), (1, 0)])
        assert a == b

    def test_too_many_pairs_rejected(self):
        data = dataset_of([make_pair(grid_8x8(), [1, 2, 3])])
        with pytest.raises(ConfigInvalid):
            overall_diversity(BankEchoModel(), data, groups=3, pairs=10)


class TestRegionDiversity:
    def test_noise_independent_model_scores_zero(self):
        data = dataset_of([make_pair(grid_8x8(), [1, 2, 3])] * 2)
        misd, moid = instance_diversity(ConstantModel(), data, resamples=3, root_seed=2)
        assert (misd, moid) == (0.0, 0.0)

    def test_painter_analytic_and_outside_zero(self):
        model = PainterModel()
        pair = make_pair(grid_8x8(), [1, 2, 3])
        data = dataset_of([pair])
        resamples, root = 3, 11
        misd, moid, records = instance_diversity(model, data, resamples=resamples,
                                                 root_seed=root, detail=True)
        assert moid == 0.0
        # expected: per instance, mean over unordered pairs of |row mean delta|
        gen = torch_generator(derived_seed(root, 2, 0))
        torch.randn(model.latent_channels, generator=gen)
        sample_noise_bank(pair.num_instances, model.noise_channels, gen)
        per_instance = []
        for _ in range(pair.num_instances):
            draws = [float(sample_replacement_rows(1, model.noise_channels, gen)[0].mean())
                     for _ in range(resamples)]
            scores = [abs(a - b) for a, b in combinations(draws, 2)]
            per_instance.append(np.mean(scores))
        assert abs(misd - np.mean(per_instance)) < 1e-7

    def test_matches_naive_reference(self):
        model = PainterModel()
        pairs = [make_pair(grid_8x8(), [1, 2, 3]),
                 make_pair(np.ones((8, 8), dtype=int), [3])]
        data = dataset_of(pairs)
        d = MeanAbsoluteDistance()
        for targets_fn, metric in ((_instance_targets, instance_diversity),
                                   (_class_targets, class_diversity)):
            got = metric(model, data, resamples=3, root_seed=5)
            want = replay_diversity_reference(model, data, 3, 5, targets_fn, d)
            assert abs(got[0] - want[0]) < 1e-9
            assert abs(got[1] - want[1]) < 1e-9

    def test_degenerate_pairs_give_identical_metrics(self):
        mask = SemanticMask(np.where(grid_8x8() == 3, 5, grid_8x8()), 5)
        pair = degenerate_instances(mask)
        data = dataset_of([pair, pair])
        model = PainterModel()
        inst = instance_diversity(model, data, resamples=3, root_seed=9)
        cls = class_diversity(model, data, resamples=3, root_seed=9)
        assert inst == cls  # bit-for-bit

    def test_empty_dataset_raises(self):
        with pytest.raises(NoInstances):
            instance_diversity(PainterModel(), [], resamples=2)

    def test_resamples_minimum(self):
        data = dataset_of([make_pair(grid_8x8(), [1, 2, 3])])
        with pytest.raises(ConfigInvalid):
            instance_diversity(PainterModel(), data, resamples=1)


class TestMiouAccu:
    def test_identical(self):
        mask = SemanticMask(grid_8x8(), 3)
        assert miou_accu(mask, mask) == (1.0, 1.0)

    def test_half_overlap_hand_count(self):
        grid_a = np.ones((4, 4), dtype=int)
        grid_b = np.ones((4, 4), dtype=int)
        grid_b[2:] = 2
        miou, accu = miou_accu(SemanticMask(grid_a, 2), SemanticMask(grid_b, 2))
        assert (miou, accu) == (0.25, 0.5)

    def test_disjoint_single_class(self):
        a = SemanticMask(np.full((3, 3), 1), 2)
        b = SemanticMask(np.full((3, 3), 2), 2)
        assert miou_accu(a, b) == (0.0, 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            miou_accu(SemanticMask(np.ones((2, 2), int), 2),
                      SemanticMask(np.ones((3, 3), int), 2))


class IdentityEmbedder:
    def __call__(self, images):
        return images.reshape(images.shape[0], -1).numpy().astype(np.float64)


class TestFid:
    def test_identical_sets(self):
        images = torch.rand(8, 3, 8, 8, generator=torch_generator(6))
        emb = PooledConvEmbedder(stages=(4, 8), seed=1)
        assert abs(fid(emb, images, images.clone())) < 1e-6

    def test_symmetry(self):
        a = torch.rand(6, 3, 8, 8, generator=torch_generator(7))
        b = torch.rand(6, 3, 8, 8, generator=torch_generator(8))
        emb = PooledConvEmbedder(stages=(4, 8), seed=2)
        assert abs(fid(emb, a, b) - fid(emb, b, a)) < 1e-6

    def test_gaussian_mean_shift_closed_form(self):
        # embeddings N(0, I) vs N(mu, I): distance tends to ||mu||^2
        rng = np.random.default_rng(9)
        mu = np.array([1.0, -0.5, 0.25, 2.0])
        n = 20000
        feats = [rng.normal(size=(n, 4)), rng.normal(size=(n, 4)) + mu]

        class TwoTables:
            def __init__(self):
                self.queue = list(feats)

            def __call__(self, images):
                return self.queue.pop(0)

        dummy = torch.zeros(n, 3, 2, 2)
        value = fid(TwoTables(), dummy, dummy)
        assert abs(value - float(mu @ mu)) < 0.05

    def test_matrix_sqrt_against_eigendecomposition(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            half = rng.normal(size=(4, 4))
            psd = half @ half.T
            root = matrix_sqrt(psd)
            w, v = np.linalg.eigh(psd)
            oracle = v @ np.diag(np.sqrt(np.clip(w, 0, None))) @ v.T
            assert np.abs(root - oracle).max() < 1e-8

    def test_degenerate_set(self):
        emb = PooledConvEmbedder(stages=(4,), seed=3)
        with pytest.raises(DegenerateSet):
            fid(emb, torch.rand(1, 3, 8, 8), torch.rand(4, 3, 8, 8))
