"""End-to-end recovery on the benchmark datasets.

The training runs take up to two hours each and only run with `TDRL_RUN_SLOW=1`.
"""
import numpy as np
import pytest
import torch

from tdrl import (
    GeneratorSpec,
    ModelConfig,
    TrainConfig,
    TransitionNet,
    brute_force_mcc,
    check_conditions,
    closed_form_density,
    compare_skeleton,
    conditional_independence_score,
    gaussian_counterexample,
    generate_dataset,
    mcc,
    recover_skeleton,
    simulate,
    simulate_gaussian_additive,
    train,
)
from tdrl.test_utils import toy_spec


def fit(dataset, **model_overrides):
    model_config = ModelConfig.for_dataset(dataset, **model_overrides)
    checkpoint, _ = train(dataset, model_config, TrainConfig())
    test = dataset.subset(checkpoint.val_indices)
    model = checkpoint.build_model()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        z_est = model.encode(torch.as_tensor(test.x, dtype=dtype)).mu
    return test, z_est.double().numpy()


@pytest.fixture(scope="module")
def fixed_dynamics():
    spec = GeneratorSpec.for_family("heteronoise_fixed", num_seqs=5_000)
    return generate_dataset(spec)


@pytest.fixture(scope="module")
def fixed_dynamics_fit(fixed_dynamics):
    test, z_est = fit(fixed_dynamics)
    return test, z_est, mcc(test.z, z_est, "spearman")


@pytest.mark.slow
class TestIdentifiability:
    def test_fixed_dynamics(self, fixed_dynamics_fit):
        _, _, report = fixed_dynamics_fit
        assert report.mcc >= 0.90

    def test_standard_normal_prior_falls_behind(
        self, fixed_dynamics, fixed_dynamics_fit
    ):
        test, z_est = fit(fixed_dynamics, prior="standard_normal")
        ablation = mcc(test.z, z_est, "spearman").mcc
        assert ablation <= fixed_dynamics_fit[2].mcc - 0.2

    def test_changing_dynamics(self):
        spec = GeneratorSpec.for_family("changing_dynamics", num_domains=5)
        test, z_est = fit(generate_dataset(spec))
        assert mcc(test.z, z_est, "spearman").mcc >= 0.85

    def test_modular_shift(self):
        spec = GeneratorSpec.for_family("modular", num_domains=5)
        test, z_est = fit(generate_dataset(spec))
        assert mcc(test.z, z_est, "spearman").mcc >= 0.90

    def test_skeleton_of_recovered_latents(self, fixed_dynamics, fixed_dynamics_fit):
        test, z_est, report = fixed_dynamics_fit
        skeleton = recover_skeleton(z_est, test.spec.lags, jobs=None)
        assert compare_skeleton(skeleton, fixed_dynamics.adjacency, report) >= 0.6


@pytest.mark.slow
def test_skeleton_of_true_latents():
    spec = GeneratorSpec.for_family(
        "heteronoise_fixed", num_seqs=2_000, edge_density=0.3
    )
    dataset = generate_dataset(spec)
    skeleton = recover_skeleton(dataset.z, spec.lags, jobs=None)
    f1 = compare_skeleton(skeleton, dataset.adjacency, np.arange(spec.n))
    assert f1 >= 0.8


@pytest.mark.parametrize("seed", range(10))
def test_gaussian_counterexample_is_not_identifiable(seed):
    spec = toy_spec(
        "gaussian_additive",
        num_seqs=2_000,
        length=10,
        noise_params={"sigma": [0.5, 1.0, 2.0]},
    )
    trajectory = simulate_gaussian_additive(spec, transition=lambda h: 0.5 * h[:, 0])
    noise_vars = trajectory.transition_params["noise_vars"]
    z_hat = gaussian_counterexample(trajectory.z, noise_vars, seed=seed)
    assert mcc(trajectory.z, z_hat, "pearson").mcc < 0.99
    assert np.max(conditional_independence_score(z_hat, spec.lags)) < 0.1


@pytest.mark.parametrize("seed", range(10))
def test_gaussian_counterexample_with_network_transition(seed):
    spec = toy_spec(
        "gaussian_additive",
        num_seqs=2_000,
        length=10,
        noise_params={"sigma": [0.5, 1.0, 2.0]},
    )
    trajectory = simulate_gaussian_additive(spec)
    net = TransitionNet.from_dict(trajectory.transition_params["transition"])
    noise_vars = trajectory.transition_params["noise_vars"]
    z_hat = gaussian_counterexample(trajectory.z, noise_vars, seed=seed)
    assert mcc(trajectory.z, z_hat, "pearson").mcc < 0.99
    # the alternative latents are conditionally independent given the history:
    # their innovations are a rotation of the whitened noise
    mean = gaussian_counterexample(net(trajectory.z[:, :-1, None]), noise_vars, seed)
    innovations = (z_hat[:, 1:] - mean).reshape(-1, spec.n)
    corr = np.corrcoef(innovations, rowvar=False)[~np.eye(spec.n, dtype=bool)]
    assert np.all(np.abs(corr) < 4.0 / np.sqrt(len(innovations)))


@pytest.mark.parametrize(
    "family, overrides, verdict",
    [
        ("gaussian_additive", {}, "dependent"),
        ("iid", {}, "dependent"),
        ("heteronoise_fixed", {}, "independent"),
        ("heteronoise_fixed", {"n": 4, "lags": 2}, "independent"),
    ],
)
def test_condition_verdicts(family, overrides, verdict):
    spec = toy_spec(family, standardize=False, **overrides)
    (trajectory,) = simulate(spec)
    density = closed_form_density(spec, [trajectory.transition_params])
    report = check_conditions(density, trajectory.z, num_prev=32, num_current=2)
    assert report.verdict == verdict


def test_assignment_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        z = rng.standard_normal((100, n))
        noise = 0.1 * rng.standard_normal((100, n))
        z_est = np.tanh(z @ rng.standard_normal((n, n))) + noise
        assert mcc(z, z_est, "pearson").mcc == pytest.approx(
            brute_force_mcc(z, z_est, "pearson")
        )
