import io

import numpy as np
import pytest
import torch

from tdrl import (
    PROGRESS_HEADER,
    ConfigError,
    DataError,
    EpochRecord,
    ModelConfig,
    NumericalError,
    PosteriorStats,
    TDRLModel,
    TrainConfig,
    TrainHistory,
    elbo_step,
    evaluate_elbo,
    mc_kld,
    reparameterized_sample,
    select_beta,
    train,
)
from tdrl.test_utils import (
    finite_difference_gradient,
    tiny_model_config,
    tiny_train_config,
    toy_dataset,
)


def double_model(seed=0, **config):
    torch.manual_seed(seed)
    fields = {"n": 2, "lags": 1, "enc_dec_width": 4, "flow_width": 4}
    fields.update(config)
    model = TDRLModel(ModelConfig(**fields)).double()
    generator = torch.Generator().manual_seed(seed)
    flows = [model.fix_flow, model.chg_flow, model.obs_flow]
    with torch.no_grad():
        for flow in filter(None, flows):
            for param in (flow.weights[2], flow.biases[2]):
                noise = torch.randn(param.shape, generator=generator)
                param.copy_(0.3 * noise.double())
    return model


def fake_history(val_total):
    record = EpochRecord(0, 0.0, 0.0, 0.0, val_total, 0.0, val_total)
    return TrainHistory([record], best_epoch=0, stop_reason="max_epochs")


class TestTrainConfig:
    test_class = TrainConfig

    @pytest.mark.parametrize(
        "field, value",
        [
            ("lr", 0.0),
            ("batch", 0),
            ("max_epochs", 0),
            ("patience", 0),
            ("mc_samples", 0),
            ("weight_decay", -1.0),
        ],
    )
    def test_invalid(self, field, value):
        with pytest.raises(ConfigError) as excinfo:
            self.test_class(**{field: value})
        assert excinfo.value.field == f"train.{field}"

    def test_beta_grid(self):
        assert self.test_class(beta_grid=0.5).beta_grid == (0.5,)
        assert self.test_class(beta_grid=[1, 0.1]).beta_grid == (1.0, 0.1)

    def test_dict_round_trip(self):
        config = self.test_class(lr=0.01, beta_grid=(0.1, 0.2), seed=3)
        assert self.test_class.from_dict(config.to_dict()) == config


class TestMCKLD:
    def test_identical_densities(self):
        model = double_model(prior="standard_normal")
        stats = PosteriorStats(
            torch.zeros(4, 5, 2, dtype=torch.float64),
            torch.zeros(4, 5, 2, dtype=torch.float64),
        )
        z_hat = reparameterized_sample(stats)
        kld = mc_kld(stats, model.prior_log_density(z_hat, 0), z_hat)
        assert kld.item() == pytest.approx(0.0, abs=1e-12)

    def test_shifted_posterior(self):
        model = double_model(prior="standard_normal")
        torch.manual_seed(0)
        stats = PosteriorStats(
            torch.ones(20000, 3, 2, dtype=torch.float64),
            torch.zeros(20000, 3, 2, dtype=torch.float64),
        )
        z_hat = reparameterized_sample(stats)
        kld = mc_kld(stats, model.prior_log_density(z_hat, 0), z_hat)
        # KL(N(1, 1) || N(0, 1)) per component
        assert kld.item() == pytest.approx(0.5, abs=0.02)

    def test_shape_mismatch(self):
        model = double_model(prior="standard_normal")
        stats = PosteriorStats(torch.zeros(2, 3, 2), torch.zeros(2, 3, 2))
        z_hat = torch.zeros(2, 3, 2)
        prior = model.float().prior_log_density(z_hat, 0)
        with pytest.raises(DataError):
            mc_kld(stats, prior, torch.zeros(2, 4, 2))


class TestELBOStep:
    def setup_method(self):
        self.model = double_model()
        generator = torch.Generator().manual_seed(1)
        self.x = torch.randn(3, 5, 2, generator=generator, dtype=torch.float64)
        self.noise = torch.randn(1, 3, 5, 2, generator=generator, dtype=torch.float64)

    def step(self, beta=0.01):
        return elbo_step(self.model, self.x, 0, beta, noise=self.noise)

    def test_beta_zero(self):
        losses = self.step(beta=0.0)
        assert losses["total"].item() == losses["recon"].item()
        assert torch.isfinite(losses["kld"])

    def test_perfect_reconstruction(self, monkeypatch):
        monkeypatch.setattr(self.model, "decode", lambda z_hat: self.x)
        losses = self.step()
        assert losses["recon"].item() == 0.0
        assert losses["total"].item() == pytest.approx(0.01 * losses["kld"].item())

    def test_gradient_matches_finite_differences(self):
        for param in (self.model.encoder[0].weight, self.model.fix_flow.weights[2]):
            self.model.zero_grad()
            self.step()["total"].backward()
            expected = finite_difference_gradient(
                lambda: self.step()["total"], param
            )
            torch.testing.assert_close(param.grad, expected, rtol=1e-5, atol=1e-7)

    def test_descent_step(self):
        before = self.step()["total"]
        before.backward()
        optimizer = torch.optim.SGD(self.model.parameters(), lr=1e-4)
        optimizer.step()
        assert self.step()["total"].item() < before.item()

    def test_mc_samples(self):
        noise = self.noise.expand(4, 3, 5, 2)
        averaged = elbo_step(self.model, self.x, 0, 0.01, mc_samples=4, noise=noise)
        single = self.step()
        torch.testing.assert_close(averaged["total"], single["total"])

    def test_non_finite_recon(self, monkeypatch):
        monkeypatch.setattr(
            self.model, "decode", lambda z_hat: torch.full_like(self.x, np.nan)
        )
        with pytest.raises(NumericalError) as excinfo:
            self.step()
        assert excinfo.value.context["term"] == "recon"

    def test_non_finite_kld(self, monkeypatch):
        monkeypatch.setattr(
            "tdrl._train.mc_kld", lambda stats, prior, z_hat: torch.tensor(np.inf)
        )
        with pytest.raises(NumericalError) as excinfo:
            self.step()
        assert excinfo.value.context["term"] == "kld"

    def test_short_sequences(self):
        with pytest.raises(DataError):
            elbo_step(self.model, self.x[:, :2], 0, 0.01)


class TestELBOGradientAcrossBlocks:
    def setup_method(self):
        self.model = double_model(partition=(0, 1, 1), num_domains=3)
        generator = torch.Generator().manual_seed(2)
        self.x = torch.randn(3, 5, 2, generator=generator, dtype=torch.float64)
        self.noise = torch.randn(1, 3, 5, 2, generator=generator, dtype=torch.float64)
        self.domains = torch.tensor([0, 2, 0])

    def step(self):
        return elbo_step(self.model, self.x, self.domains, 0.5, noise=self.noise)

    def params(self):
        model = self.model
        return {
            "decoder": model.decoder[0].weight,
            "decoder_out": model.decoder[-1].bias,
            "chg_flow_in": model.chg_flow.weights[0],
            "chg_flow_out": model.chg_flow.weights[2],
            "obs_flow_in": model.obs_flow.weights[0],
            "obs_flow_out": model.obs_flow.biases[2],
            "theta_dyn": model.change_factors.theta_dyn,
            "theta_obs": model.change_factors.theta_obs,
        }

    @pytest.mark.parametrize(
        "name",
        [
            "decoder",
            "decoder_out",
            "chg_flow_in",
            "chg_flow_out",
            "obs_flow_in",
            "obs_flow_out",
            "theta_dyn",
            "theta_obs",
        ],
    )
    def test_gradient_matches_finite_differences(self, name):
        param = self.params()[name]
        self.model.zero_grad()
        self.step()["total"].backward()
        expected = finite_difference_gradient(lambda: self.step()["total"], param)
        torch.testing.assert_close(param.grad, expected, rtol=1e-5, atol=1e-7)

    @pytest.mark.parametrize("name", ["theta_dyn", "theta_obs"])
    def test_change_factors_of_batch_domains_only(self, name):
        param = self.params()[name]
        self.model.zero_grad()
        self.step()["total"].backward()
        assert torch.all(param.grad[1] == 0.0)
        assert torch.all(param.grad[[0, 2]].abs().sum(dim=-1) > 0.0)


class TestEvaluateELBO:
    def test_repeatable(self):
        model = double_model()
        x = torch.randn(10, 4, 2, dtype=torch.float64)
        domains = torch.zeros(10, dtype=torch.long)
        first = evaluate_elbo(model, x, domains, 0.01, seed=2, batch_size=3)
        second = evaluate_elbo(model, x, domains, 0.01, seed=2, batch_size=3)
        assert first == second
        assert model.training


class TestTrain:
    def test_single_epoch(self):
        dataset = toy_dataset()
        progress = io.StringIO()
        checkpoint, history = train(
            dataset,
            tiny_model_config(dataset),
            tiny_train_config(max_epochs=1),
            progress,
        )
        assert len(history.records) == 1
        assert history.best_epoch == 0
        assert history.stop_reason == "max_epochs"
        assert all(np.isfinite(value) for value in history.to_rows()[0])
        lines = progress.getvalue().splitlines()
        assert lines[0] == PROGRESS_HEADER
        assert lines[1].startswith("0,")
        assert len(checkpoint.val_indices) == 10

    def test_early_stopping(self, monkeypatch):
        values = iter([3.0, 2.0, 2.5, 2.6, 1.0])

        def fake_evaluate(model, x, domains, beta, seed=0, batch_size=256):
            value = next(values)
            return {"recon": value, "kld": 0.0, "total": value}

        monkeypatch.setattr("tdrl._train.evaluate_elbo", fake_evaluate)
        dataset = toy_dataset()
        _, history = train(
            dataset,
            tiny_model_config(dataset),
            tiny_train_config(max_epochs=5, patience=2),
        )
        assert len(history.records) == 4
        assert history.best_epoch == 1
        assert history.best_val_total == 2.0
        assert history.stop_reason == "early_stopping"

    def test_reproducible(self):
        dataset = toy_dataset()
        runs = [
            train(dataset, tiny_model_config(dataset), tiny_train_config())
            for _ in range(2)
        ]
        (ckpt1, hist1), (ckpt2, hist2) = runs
        np.testing.assert_allclose(hist1.to_rows(), hist2.to_rows(), rtol=1e-6)
        for name, value in ckpt1.state_dict.items():
            torch.testing.assert_close(value, ckpt2.state_dict[name])

    def test_checkpoint_holds_best_state(self):
        dataset = toy_dataset("modular")
        model_config = tiny_model_config(dataset)
        train_config = tiny_train_config(max_epochs=3, patience=3)
        checkpoint, history = train(dataset, model_config, train_config)
        model = checkpoint.build_model()
        assert not model.training
        idx = checkpoint.val_indices
        x = torch.as_tensor(dataset.x[idx], dtype=torch.get_default_dtype())
        domains = torch.as_tensor(dataset.domains[idx])
        val = evaluate_elbo(model, x, domains, model_config.beta, seed=0)
        assert val["total"] == pytest.approx(history.best_val_total, rel=1e-5)

    @pytest.mark.parametrize(
        "overrides", [{"partition": (1, 1, 1)}, {"obs_dim": 5}, {"lags": 5}]
    )
    def test_incompatible(self, overrides):
        dataset = toy_dataset()
        model_config = tiny_model_config(dataset, **overrides)
        with pytest.raises((ConfigError, DataError)):
            train(dataset, model_config, tiny_train_config())

    def test_domain_labels_beyond_config(self):
        dataset = toy_dataset("modular")
        model_config = tiny_model_config(dataset, num_domains=2)
        with pytest.raises(ConfigError) as excinfo:
            train(dataset, model_config, tiny_train_config())
        assert excinfo.value.field == "model.num_domains"


class TestSelectBeta:
    @pytest.fixture
    def fake_train(self, monkeypatch):
        def install(val_totals, failing=()):
            def fake(dataset, model_config, train_config, progress=None):
                if model_config.beta in failing:
                    raise NumericalError("kld loss is not finite", term="kld")
                return None, fake_history(val_totals[model_config.beta])

            monkeypatch.setattr("tdrl._train.train", fake)

        return install

    def test_singleton(self, fake_train):
        fake_train({0.1: 1.0})
        dataset = toy_dataset()
        best, trials = select_beta(
            dataset, tiny_model_config(dataset), tiny_train_config(beta_grid=[0.1])
        )
        assert best == 0.1
        assert len(trials) == 1

    def test_argmin(self, fake_train):
        fake_train({0.1: 3.0, 0.2: 1.0, 0.3: 2.0})
        dataset = toy_dataset()
        best, trials = select_beta(
            dataset,
            tiny_model_config(dataset),
            tiny_train_config(beta_grid=[0.1, 0.2, 0.3]),
        )
        assert best == 0.2
        assert [trial.beta for trial in trials] == [0.1, 0.2, 0.3]

    def test_tie_goes_to_first(self, fake_train):
        fake_train({0.1: 1.0, 0.2: 1.0})
        dataset = toy_dataset()
        best, _ = select_beta(
            dataset, tiny_model_config(dataset), tiny_train_config(beta_grid=[0.2, 0.1])
        )
        assert best == 0.2

    def test_failed_grid_point(self, fake_train):
        fake_train({0.1: 1.0, 0.2: 2.0}, failing=(0.1,))
        dataset = toy_dataset()
        best, trials = select_beta(
            dataset, tiny_model_config(dataset), tiny_train_config(beta_grid=[0.1, 0.2])
        )
        assert best == 0.2
        assert isinstance(trials[0].error, NumericalError)
        assert trials[0].history is None

    def test_every_grid_point_fails(self, fake_train):
        fake_train({}, failing=(0.1, 0.2))
        dataset = toy_dataset()
        with pytest.raises(NumericalError):
            select_beta(
                dataset,
                tiny_model_config(dataset),
                tiny_train_config(beta_grid=[0.1, 0.2]),
            )

    def test_real_training(self):
        dataset = toy_dataset()
        best, trials = select_beta(
            dataset,
            tiny_model_config(dataset),
            tiny_train_config(max_epochs=1, beta_grid=[0.01, 0.1]),
        )
        assert best in (0.01, 0.1)
        assert all(trial.checkpoint.beta == trial.beta for trial in trials)
