import math

import numpy as np
import pytest
import torch
from torch import nn

from flowup import phantom
from flowup.model import (ConditioningBundle, CrossAttentionBlock, ModelConfig,
                          ResidualBlock, build_conditioning,
                          checkpoint_to_bytes, init_model, parameter_count)
from flowup.phantom import ChemoArm, TreatmentContext
from flowup.train import (NumericError, TrainHyper, TrainingError, flow_loss,
                          interpolate_path, rf_loss, train, validation_loss)

from fd_oracle import finite_difference_grads, max_relative_error

TINY = ModelConfig(image_size=8, level_widths=(1, 1, 1), attention_levels=(2,),
                   context_dim=2, attention_heads=1, time_embed_dim=2)


def tiny_bundle(dtype=torch.float64):
    rng = np.random.default_rng(0)
    baseline = rng.random((8, 8, 3)).astype(np.float32)
    dose = rng.random((8, 8)).astype(np.float32)
    ctx = TreatmentContext(300, ChemoArm.NONE, 1.1)
    b = build_conditioning(TINY, baseline, dose, ctx)
    b.spatial = b.spatial.to(dtype)
    b.days = b.days.to(dtype)
    b.chemo_onehot = b.chemo_onehot.to(dtype)
    return b


class ConstantNet(nn.Module):
    """Stub emitting a learned constant velocity; exercises the loss math."""

    def __init__(self, value, shape):
        super().__init__()
        self.c = nn.Parameter(torch.full(shape, float(value), dtype=torch.float64))

    def forward(self, x_t, t, bundle):
        return self.c


class TestInterpolation:
    def test_endpoints_exact(self):
        gen = torch.Generator().manual_seed(0)
        x0 = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        x1 = torch.rand(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        assert torch.equal(interpolate_path(x0, x1, torch.tensor([0.0, 0.0])), x0)
        assert torch.equal(interpolate_path(x0, x1, torch.tensor([1.0, 1.0])), x1)

    def test_midpoint(self):
        x0 = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
        x1 = torch.ones(1, 1, 1, 1, dtype=torch.float64)
        mid = interpolate_path(x0, x1, torch.tensor([0.25]))
        assert mid.item() == pytest.approx(0.25, abs=1e-15)


class TestRfLoss:
    def test_constant_network_closed_form(self):
        # single pixel, x0 = 0, x1 = 1, any fixed t: loss = |c - 1|
        for c in (-0.5, 0.0, 0.3, 2.0):
            net = ConstantNet(c, (1, 1, 1, 1))
            x0 = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
            x1 = torch.ones(1, 1, 1, 1, dtype=torch.float64)
            loss, grads = rf_loss(net, x1, bundle=None, x0=x0, t=torch.tensor([0.3]))
            assert loss == pytest.approx(abs(c - 1.0), abs=1e-12)
            assert grads["c"].item() == pytest.approx(math.copysign(1.0, c - 1.0)
                                                      if c != 1.0 else 0.0)

    def test_perfect_network_zero_loss_and_zero_subgradient(self):
        gen = torch.Generator().manual_seed(1)
        x0 = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
        x1 = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)

        class Oracle(nn.Module):
            def __init__(self):
                super().__init__()
                self.v = nn.Parameter((x1 - x0).clone())

            def forward(self, x_t, t, bundle):
                return self.v

        net = Oracle()
        loss, grads = rf_loss(net, x1, bundle=None, x0=x0, t=torch.tensor([0.7]))
        assert loss == 0.0
        # |.| subgradient at 0 is defined as 0
        assert np.array_equal(grads["v"], np.zeros_like(grads["v"]))

    def test_nonfinite_activation_names_layer(self):
        net = init_model(TINY, seed=0).double()
        with torch.no_grad():
            net.mid0.conv1.weight[0, 0, 0, 0] = math.nan
        x1 = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        with pytest.raises(NumericError, match="mid0"):
            flow_loss(net, x1, tiny_bundle(), x0=torch.zeros_like(x1),
                      t=torch.tensor([0.5], dtype=torch.float64))


class TestGradientCheck:
    """Analytic autograd gradients vs an independent central-difference oracle."""

    def test_tiny_network_is_small_enough(self):
        assert parameter_count(init_model(TINY, seed=0)) <= 500

    def test_full_tiny_network(self):
        net = init_model(TINY, seed=0).double()
        bundle = tiny_bundle()
        gen = torch.Generator().manual_seed(13)  # margin to the |.| kink verified
        x1 = torch.rand((1, 3, 8, 8), generator=gen, dtype=torch.float64)
        x0 = torch.randn((1, 3, 8, 8), generator=gen, dtype=torch.float64)
        t = torch.rand((1,), generator=gen, dtype=torch.float64)

        with torch.no_grad():
            resid = (net(interpolate_path(x0, x1, t), t, bundle) - (x1 - x0)).abs().min()
        assert resid > 1e-3, "pinned draw too close to the |.| kink"

        _, analytic = rf_loss(net, x1, bundle, x0=x0, t=t)
        fd = finite_difference_grads(
            net, lambda: flow_loss(net, x1, bundle, x0=x0, t=t))
        worst, where = max_relative_error(analytic, fd)
        assert worst < 1e-4, f"max relative error {worst:.3e} at {where}"

    @pytest.mark.parametrize("block_name", ["residual", "attention", "stem_head"])
    def test_layer_types_in_isolation(self, block_name):
        torch.manual_seed(3)
        gen = torch.Generator().manual_seed(4)
        if block_name == "residual":
            block = ResidualBlock(3, 5, emb_dim=4).double()
            x = torch.randn(2, 3, 6, 6, generator=gen, dtype=torch.float64)
            emb = torch.randn(2, 4, generator=gen, dtype=torch.float64)
            coef = torch.randn(2, 5, 6, 6, generator=gen, dtype=torch.float64)
            loss_fn = lambda: (block(x, emb) * coef).mean()
        elif block_name == "attention":
            block = CrossAttentionBlock(4, ctx_dim=3, heads=2).double()
            x = torch.randn(2, 4, 5, 5, generator=gen, dtype=torch.float64)
            tokens = torch.randn(2, 2, 3, generator=gen, dtype=torch.float64)
            coef = torch.randn(2, 4, 5, 5, generator=gen, dtype=torch.float64)
            loss_fn = lambda: (block(x, tokens) * coef).mean()
        else:
            block = nn.Sequential(nn.Conv2d(2, 3, 3, padding=1), nn.SiLU(),
                                  nn.GroupNorm(1, 3), nn.Conv2d(3, 1, 1)).double()
            x = torch.randn(2, 2, 6, 6, generator=gen, dtype=torch.float64)
            loss_fn = lambda: (block(x) ** 2).mean()

        block.zero_grad()
        loss = loss_fn()
        loss.backward()
        analytic = {n: p.grad.detach().numpy().copy()
                    for n, p in block.named_parameters()}
        fd = finite_difference_grads(block, loss_fn)
        worst, where = max_relative_error(analytic, fd)
        assert worst < 1e-4, f"{block_name}: max relative error {worst:.3e} at {where}"


@pytest.fixture(scope="module")
def mini_cohort():
    return phantom.generate_cohort(6, 16, seed=5)


MINI_CONFIG = ModelConfig(image_size=16, level_widths=(6, 8, 12), context_dim=8,
                          attention_heads=2, time_embed_dim=8)
MINI_HYPER = TrainHyper(batch=2, grad_accum=2, lr=2e-3, epochs=3,
                        steps_per_epoch=5, seed=21)


class TestTrain:
    def test_zero_epochs_returns_initial_checkpoint(self, mini_cohort):
        hyper = TrainHyper(epochs=0, seed=9)
        ckpt = train(mini_cohort, MINI_CONFIG, hyper)
        assert ckpt.metadata["loss_history"] == {"train": [], "val": []}
        init = init_model(MINI_CONFIG, seed=9)
        for name, p in init.state_dict().items():
            assert np.array_equal(ckpt.tensors[name], p.numpy())

    def test_bit_identical_across_runs(self, mini_cohort):
        a = train(mini_cohort, MINI_CONFIG, MINI_HYPER)
        b = train(mini_cohort, MINI_CONFIG, MINI_HYPER)
        assert checkpoint_to_bytes(a) == checkpoint_to_bytes(b)

    def test_history_and_best_epoch(self, mini_cohort):
        ckpt = train(mini_cohort[:4], MINI_CONFIG, MINI_HYPER,
                     val_records=mini_cohort[4:])
        hist = ckpt.metadata["loss_history"]
        assert len(hist["train"]) == MINI_HYPER.epochs
        assert len(hist["val"]) == MINI_HYPER.epochs
        best = ckpt.metadata["best_epoch"]
        assert hist["val"][best] == min(hist["val"])

    def test_loss_decreases(self, mini_cohort):
        hyper = TrainHyper(batch=4, grad_accum=1, lr=3e-3, epochs=4,
                           steps_per_epoch=8, seed=2)
        ckpt = train(mini_cohort, MINI_CONFIG, hyper)
        hist = ckpt.metadata["loss_history"]["train"]
        assert hist[-1] < hist[0]

    def test_divergence_raises_training_error(self, mini_cohort):
        hyper = TrainHyper(batch=2, grad_accum=1, lr=1e18, epochs=4,
                           steps_per_epoch=8, seed=0)
        with pytest.raises(TrainingError, match="epoch"):
            train(mini_cohort, MINI_CONFIG, hyper)

    def test_empty_cohort_rejected(self):
        with pytest.raises(ValueError):
            train([], MINI_CONFIG, MINI_HYPER)

    def test_hyper_validation(self):
        with pytest.raises(ValueError):
            TrainHyper(batch=0)
        with pytest.raises(ValueError):
            TrainHyper(epochs=-1)
        with pytest.raises(ValueError):
            TrainHyper(lr=0.0)


def test_validation_loss_is_repeatable(mini_cohort):
    net = init_model(MINI_CONFIG, seed=1)
    a = validation_loss(net, mini_cohort[:2])
    b = validation_loss(net, mini_cohort[:2])
    assert a == b
