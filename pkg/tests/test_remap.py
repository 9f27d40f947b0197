import math

import numpy as np
import pytest
import torch

from helpers import finite_difference_gradients, relative_gradient_error

from inade.core import sample_noise_bank
from inade.errors import ShapeMismatch
from inade.labels import InstanceMap, SemanticMask, validate_pair
from inade.remap import (
    PerturbationSet,
    RemappingEncoder,
    build_perturbation_set,
    encode_reference,
    instance_average_pool,
    instance_masked_resample,
    instance_partial_conv,
    kl_loss,
    remap_noise,
)


def gen_of(seed):
    return torch.Generator().manual_seed(seed)


def pair_from_inst(inst_grid, num_classes=None):
    inst_grid = np.asarray(inst_grid)
    num_classes = num_classes or int(inst_grid.max())
    mask = np.minimum(inst_grid, num_classes)
    return validate_pair(SemanticMask(mask, num_classes),
                         InstanceMap(inst_grid, int(inst_grid.max())))


class TestInstancePartialConv:
    def test_full_window(self):
        x = torch.tensor([[[5.0, 5.0, 5.0]]])
        weight = torch.ones(1, 1, 1, 3)
        out = instance_partial_conv(x, [[1, 1, 1]], weight)
        assert out[0, 0, 1].item() == 15.0

    def test_edge_renormalization(self):
        x = torch.tensor([[[5.0, 5.0, 5.0]]])
        weight = torch.ones(1, 1, 1, 3)
        out = instance_partial_conv(x, [[1, 1, 1]], weight)
        # two valid pixels at the border: (5 + 5) * (3 / 2)
        assert out[0, 0, 0].item() == 15.0

    def test_other_instances_are_invisible(self):
        inst = [[1, 1, 2]]
        weight = torch.randn(2, 1, 1, 3, generator=gen_of(0))
        bias = torch.randn(2, generator=gen_of(1))
        x1 = torch.tensor([[[1.0, 2.0, 3.0]]])
        x2 = torch.tensor([[[1.0, 2.0, 99.0]]])
        out1 = instance_partial_conv(x1, inst, weight, bias)
        out2 = instance_partial_conv(x2, inst, weight, bias)
        assert torch.equal(out1[:, :, :2], out2[:, :, :2])

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeMismatch):
            instance_partial_conv(torch.zeros(1, 2, 2), [[1, 1], [1, 1]],
                                  torch.zeros(1, 1, 2, 2))


class TestMaskedResample:
    def test_uniform_constant(self):
        x = torch.full((2, 4, 4), 3.5)
        inst = np.ones((4, 4), dtype=int)
        down, small = instance_masked_resample(x, inst, "down")
        assert torch.allclose(down, torch.full((2, 2, 2), 3.5))
        assert small.shape == (2, 2)

    def test_split_window_masked_average(self):
        inst = np.array([[1, 2], [2, 1]])
        x = torch.tensor([[[4.0, 100.0], [100.0, 6.0]]])
        down, small = instance_masked_resample(x, inst, "down")
        # the downsampled center is instance inst[1,1]=1; its pixels hold 4 and 6
        assert small.tolist() == [[1]]
        assert down.squeeze().item() == 5.0

    def test_up_of_down_is_identity_on_uniform(self):
        x = torch.full((3, 4, 4), -0.25)
        inst = np.ones((4, 4), dtype=int)
        down, small = instance_masked_resample(x, inst, "down")
        up, big = instance_masked_resample(down, small.numpy(), "up")
        assert torch.equal(up, x)
        assert np.array_equal(big.numpy(), inst)

    def test_bad_direction(self):
        with pytest.raises(ShapeMismatch):
            instance_masked_resample(torch.zeros(1, 2, 2), np.ones((2, 2), int), "sideways")


class TestInstanceAveragePool:
    def test_two_values(self):
        inst = np.array([[1, 1], [2, 2]])
        out = instance_average_pool(torch.tensor([[2.0, 4.0], [7.0, 7.0]]), inst)
        assert out.tolist() == [3.0, 7.0]

    def test_single_pixel_instance(self):
        inst = np.array([[1, 2], [2, 2]])
        out = instance_average_pool(torch.tensor([[9.0, 1.0], [2.0, 3.0]]), inst)
        assert out[0].item() == 9.0

    def test_against_loop(self):
        rng = np.random.default_rng(7)
        inst = rng.integers(1, 5, size=(8, 8))
        inst.flat[:4] = [1, 2, 3, 4]
        values = torch.randn(8, 8, generator=gen_of(2), dtype=torch.float64)
        out = instance_average_pool(values, inst)
        for label in range(1, 5):
            expected = values.numpy()[inst == label].mean()
            assert abs(out[label - 1].item() - expected) < 1e-9


class TestPerturbationSet:
    def test_zero_logvar_gives_unit_scale(self):
        maps = self._maps(s_value=0.0, b_value=0.3)
        ps = build_perturbation_set(maps, np.ones((4, 4), dtype=int))
        assert ps.a_gamma.item() == 1.0
        assert abs(ps.b_gamma.item() - 0.3) < 1e-7

    def test_closed_form_scale(self):
        maps = self._maps(s_value=2 * math.log(2.0), b_value=0.0)
        ps = build_perturbation_set(maps, np.ones((4, 4), dtype=int))
        assert abs(ps.a_gamma.item() - 2.0) < 1e-6

    def test_scale_monotone_in_logvar(self):
        values = [build_perturbation_set(self._maps(s, 0.0),
                                         np.ones((4, 4), int)).a_gamma.item()
                  for s in (-1.0, 0.0, 1.0, 2.0)]
        assert values == sorted(values)
        assert all(v > 0 for v in values)

    @staticmethod
    def _maps(s_value, b_value):
        from inade.remap import PerturbationMaps
        s = torch.full((4, 4), float(s_value))
        b = torch.full((4, 4), float(b_value))
        return PerturbationMaps(s_gamma=s, b_gamma=b, s_beta=s.clone(), b_beta=b.clone())


class TestRemapNoise:
    def test_identity(self):
        bank = sample_noise_bank(3, 8, gen_of(3))
        out = remap_noise(bank, PerturbationSet.identity(3))
        assert torch.equal(out.n_gamma, bank.n_gamma)
        assert torch.equal(out.n_beta, bank.n_beta)
        assert out.remapped

    def test_shift(self):
        bank = sample_noise_bank(2, 4, gen_of(4))
        ps = PerturbationSet.identity(2)
        ps.b_gamma[1] = 5.0
        out = remap_noise(bank, ps)
        assert torch.equal(out.n_gamma[0], bank.n_gamma[0])
        assert torch.allclose(out.n_gamma[1], bank.n_gamma[1] + 5.0)

    def test_remapped_law_monte_carlo(self):
        draws = 100_000
        bank = sample_noise_bank(draws, 1, gen_of(5))
        ps = PerturbationSet(
            a_gamma=torch.full((draws,), 2.0), b_gamma=torch.full((draws,), 1.0),
            a_beta=torch.ones(draws), b_beta=torch.zeros(draws))
        out = remap_noise(bank, ps)
        values = out.n_gamma.reshape(-1)
        assert abs(values.mean().item() - 1.0) < 0.03
        assert abs(values.std().item() - 2.0) < 0.04

    def test_row_count_mismatch(self):
        with pytest.raises(ShapeMismatch):
            remap_noise(sample_noise_bank(3, 4, gen_of(6)), PerturbationSet.identity(2))


class TestKLLoss:
    def closed_form(self, b, a):
        return 0.5 * (a * a + b * b - 1.0 - math.log(a * a))

    def make_set(self, b, a):
        t = lambda v: torch.tensor([float(v)])
        return PerturbationSet(a_gamma=t(a), b_gamma=t(b), a_beta=t(a), b_beta=t(b))

    def test_standard_normal_is_zero(self):
        assert kl_loss(self.make_set(0.0, 1.0)).item() == 0.0

    def test_unit_shift(self):
        assert abs(kl_loss(self.make_set(1.0, 1.0)).item() - 0.5) < 1e-7

    def test_double_scale(self):
        expected = self.closed_form(0.0, 2.0)
        assert abs(expected - 0.8068528) < 1e-6
        assert abs(kl_loss(self.make_set(0.0, 2.0)).item() - expected) < 1e-6

    def test_monte_carlo_cross_check(self):
        rng = np.random.default_rng(11)
        for b, a in ((0.0, 1.0), (1.0, 1.0), (0.0, 2.0), (-0.5, 0.7)):
            z = rng.normal(b, a, size=1_000_000)
            log_q = -0.5 * ((z - b) / a) ** 2 - math.log(a)
            log_p = -0.5 * z ** 2
            estimate = float(np.mean(log_q - log_p))
            assert abs(estimate - self.closed_form(b, a)) < 1e-2

    def test_nonnegative_with_equality_iff_standard(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            b = float(rng.normal(0, 1.5))
            a = float(np.exp(rng.normal(0, 0.7)))
            value = kl_loss(self.make_set(b, a)).item()
            assert value >= 0.0
            if abs(b) > 1e-3 or abs(a - 1) > 1e-3:
                assert value > 0.0


class TestEncoder:
    def small_encoder(self, widths=(4, 8), seed=13):
        torch.manual_seed(seed)
        return RemappingEncoder(in_channels=3, widths=widths)

    def inst_grid(self):
        grid = np.ones((8, 8), dtype=int)
        grid[0:4, 0:4] = 2
        grid[5:7, 5:8] = 3
        return grid

    def test_output_shape(self):
        enc = self.small_encoder()
        pair = pair_from_inst(self.inst_grid())
        r = torch.rand(3, 8, 8, generator=gen_of(14)) * 2 - 1
        maps = encode_reference(enc, r, pair)
        for name in ("s_gamma", "b_gamma", "s_beta", "b_beta"):
            assert getattr(maps, name).shape == (8, 8)

    def test_region_invariance(self):
        enc = self.small_encoder(widths=(6, 12, 24))
        grid = np.ones((16, 16), dtype=int)
        grid[2:9, 3:10] = 2
        grid[10:15, 10:15] = 3
        pair = pair_from_inst(grid)
        r = torch.rand(3, 16, 16, generator=gen_of(15)) * 2 - 1
        base = build_perturbation_set(enc(r, pair), grid)
        rng = np.random.default_rng(16)
        for target in (1, 2, 3):
            region = torch.as_tensor(grid == target)
            for _ in range(3):
                noise = torch.as_tensor(rng.normal(0, 0.5, size=(3, 16, 16)),
                                        dtype=torch.float32)
                perturbed = r.clone()
                perturbed[:, ~region] += noise[:, ~region]
                ps = build_perturbation_set(enc(perturbed, pair), grid)
                for name in ("a_gamma", "b_gamma", "a_beta", "b_beta"):
                    diff = (getattr(ps, name)[target - 1]
                            - getattr(base, name)[target - 1]).abs().item()
                    assert diff < 1e-6

    def test_batch_path_matches_single(self):
        enc = self.small_encoder(widths=(4, 8, 8))
        grids = [self.inst_grid(), np.ones((8, 8), dtype=int)]
        pairs = [pair_from_inst(g) for g in grids]
        images = torch.rand(2, 3, 8, 8, generator=gen_of(17)) * 2 - 1
        batched = enc.forward_batch(images, pairs)
        for i, pair in enumerate(pairs):
            single = enc(images[i], pair)
            for name in ("s_gamma", "b_gamma", "s_beta", "b_beta"):
                diff = (getattr(single, name) - getattr(batched[i], name)).abs().max()
                assert diff.item() < 1e-5

    def test_dims_must_divide(self):
        enc = self.small_encoder(widths=(4, 8, 8))
        pair = pair_from_inst(np.ones((6, 6), dtype=int))
        with pytest.raises(ShapeMismatch):
            enc(torch.zeros(3, 6, 6), pair)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(18)
        enc = RemappingEncoder(in_channels=3, widths=(3, 5)).double()
        grid = self.inst_grid()
        pair = pair_from_inst(grid)
        r = (torch.rand(3, 8, 8, generator=gen_of(19), dtype=torch.float64) * 2 - 1)
        r.requires_grad_(True)
        weights = torch.randn(4, 3, dtype=torch.float64, generator=gen_of(20))

        def loss_fn():
            ps = build_perturbation_set(enc(r, pair), grid)
            stacked = torch.stack([ps.a_gamma, ps.b_gamma, ps.a_beta, ps.b_beta])
            return (stacked * weights).sum() + kl_loss(ps)

        tensors = list(enc.parameters()) + [r]
        loss = loss_fn()
        grads = torch.autograd.grad(loss, tensors)
        fd = finite_difference_gradients(loss_fn, tensors, h=1e-6, max_entries=10)
        for i, analytic in enumerate(grads):
            idx, numeric = fd[i]
            assert relative_gradient_error(analytic, idx, numeric) < 1e-3
