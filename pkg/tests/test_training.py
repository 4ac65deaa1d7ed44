import json
import math

import pytest
import torch

from snflows.amortize import AmortizationConfig
from snflows.errors import DivergenceError
from snflows.linalg import DTYPE
from snflows.training import (
    TRACE_FIELDS,
    TrainingConfig,
    VAEConfig,
    bars_dataset,
    binarize,
    evaluate_vae,
    fit_target,
    flow_config_for,
    load_vae_checkpoint,
    train_toy_vae,
    vae_checkpoint,
    validation_split,
)
from snflows.vi import TargetDensity, correlated_gaussian, standard_gaussian_target

SMALL_VAE = VAEConfig(latent_dim=2, feature_dim=4, hidden=8, train_size=64, val_size=16, val_samples=4)


def quick(seed=0, **kw):
    base = dict(seed=seed, epochs=3, steps_per_epoch=4, batch_size=16, eval_samples=200,
                importance_samples=20, anneal_epochs=2)
    base.update(kw)
    return TrainingConfig(**base)


def strip_clock(trace):
    return [{k: v for k, v in row.items() if k != "wallclock"} for row in trace]


class TestConfig:
    def test_defaults(self):
        cfg = TrainingConfig(seed=0)
        assert (cfg.learning_rate, cfg.anneal_epochs, cfg.importance_samples) == (5e-4, 100, 5000)

    @pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"anneal_epochs": 0}, {"batch_size": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainingConfig(seed=0, **kw)


class TestFitTarget:
    def test_standard_normal_baseline(self):
        cfg = quick(epochs=200, steps_per_epoch=5, eval_samples=5000)
        res = fit_target(cfg, standard_gaussian_target(2), AmortizationConfig(1, 2, 0))
        assert res.final_F < 0.01
        assert len(res.trace) == 200 and list(res.trace[0]) == list(TRACE_FIELDS)

    def test_deterministic(self):
        flows = AmortizationConfig(1, 2, 2, "tsnf")
        a = fit_target(quick(seed=4), correlated_gaussian(0.9), flows)
        b = fit_target(quick(seed=4), correlated_gaussian(0.9), flows)
        assert strip_clock(a.trace) == strip_clock(b.trace) and a.final_F == b.final_F

    def test_divergence_aborts_with_trace(self):
        calls = {"n": 0}

        def log_density(z):
            calls["n"] += 1
            value = -0.5 * (z ** 2).sum(-1)
            return value if calls["n"] <= 6 else value * float("nan")

        with pytest.raises(DivergenceError) as exc:
            fit_target(quick(steps_per_epoch=2), TargetDensity(log_density, 2), AmortizationConfig(1, 2, 1, "planar"))
        assert len(exc.value.trace) >= 1

    def test_requires_constant_feature(self):
        with pytest.raises(ValueError):
            fit_target(quick(), standard_gaussian_target(2), AmortizationConfig(3, 2, 0))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fit_target(quick(), standard_gaussian_target(3), AmortizationConfig(1, 2, 0))


class TestData:
    def test_bars(self, gen):
        probs = bars_dataset(50, gen)
        assert probs.shape == (50, 64)
        assert set(torch.unique(probs).tolist()) <= {0.03, 0.95}
        assert bool(((probs > 0.5).sum(1) >= 8).all())  # every image has at least one bar
        x = binarize(probs, gen)
        assert set(torch.unique(x).tolist()) <= {0.0, 1.0}

    def test_split_deterministic(self):
        a, b = validation_split(SMALL_VAE, 3), validation_split(SMALL_VAE, 3)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


class TestToyVAE:
    def test_baseline_and_flow_runs(self):
        cfg = quick(epochs=2, anneal_epochs=1)
        base = train_toy_vae(cfg, SMALL_VAE, flow_config_for("tsnf", SMALL_VAE, 0))
        flow = train_toy_vae(cfg, SMALL_VAE, flow_config_for("tsnf", SMALL_VAE, 2))
        for r in (base, flow):
            assert len(r.trace) == 2 and r.trace[0]["beta"] == 0.0 and r.trace[1]["beta"] == 1.0
            assert math.isfinite(r.nll) and math.isfinite(r.final_neg_elbo)

    def test_paired_runs_share_encoder_and_decoder_init(self):
        from snflows.training import ToyVAE
        a = ToyVAE(SMALL_VAE, flow_config_for("tsnf", SMALL_VAE, 0), 5)
        b = ToyVAE(SMALL_VAE, flow_config_for("osnf", SMALL_VAE, 3, bottleneck=1), 5)
        for name, p in a.encoder.state_dict().items():
            assert torch.equal(p, b.encoder.state_dict()[name])
        for name, p in a.decoder.state_dict().items():
            assert torch.equal(p, b.decoder.state_dict()[name])

    def test_deterministic(self):
        flows = flow_config_for("hsnf", SMALL_VAE, 2, reflections=2)
        a = train_toy_vae(quick(seed=9, epochs=2), SMALL_VAE, flows)
        b = train_toy_vae(quick(seed=9, epochs=2), SMALL_VAE, flows)
        assert strip_clock(a.trace) == strip_clock(b.trace) and a.nll == b.nll

    def test_checkpoint_round_trip(self):
        cfg = quick(seed=2, epochs=1)
        res = train_toy_vae(cfg, SMALL_VAE, flow_config_for("iaf", SMALL_VAE, 2, made_width=6))
        doc = json.loads(json.dumps(vae_checkpoint(res.model, cfg.seed)))
        model = load_vae_checkpoint(doc)
        _, val = validation_split(SMALL_VAE, cfg.seed)
        assert evaluate_vae(model, val, 4, cfg.seed) == evaluate_vae(res.model, val, 4, cfg.seed)

    def test_empty_dataset(self):
        empty = torch.zeros(0, 64, dtype=DTYPE)
        with pytest.raises(ValueError):
            train_toy_vae(quick(), SMALL_VAE, flow_config_for("tsnf", SMALL_VAE, 0), data=(empty, empty))
