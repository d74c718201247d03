import numpy as np
import torch

from ._data import generate_dataset
from ._model import ModelConfig
from ._sim import GeneratorSpec
from ._train import TrainConfig


def toy_spec(family="heteronoise_fixed", **overrides):
    """A spec small enough to simulate in milliseconds."""
    fields = {
        "n": 3,
        "lags": 1,
        "length": 6,
        "num_seqs": 40,
        "burn_in": 10,
        "hidden": 8,
    }
    if family in ("changing_dynamics", "modular"):
        fields.update(num_seqs=20, num_domains=3)
    if family == "modular":
        fields["partition"] = (1, 1, 1)
    fields.update(overrides)
    return GeneratorSpec(family=family, **fields)


def toy_dataset(family="heteronoise_fixed", **overrides):
    return generate_dataset(toy_spec(family, **overrides))


def tiny_model_config(dataset, **overrides):
    fields = {"enc_dec_width": 16, "flow_width": 8}
    fields.update(overrides)
    return ModelConfig.for_dataset(dataset, **fields)


def tiny_train_config(**overrides):
    fields = {"batch": 16, "max_epochs": 2, "patience": 1, "val_fraction": 0.25}
    fields.update(overrides)
    return TrainConfig(**fields)


def finite_difference_gradient(f, x, step=1e-6):
    """Central-difference gradient of the scalar function `f` at the tensor `x`.

    `x` is perturbed in place one entry at a time and restored, so `x` may be
    a model parameter that `f` reads implicitly.
    """
    grad = torch.zeros_like(x)
    flat, grad_flat = x.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + step
            plus = float(f())
            flat[i] = original - step
            minus = float(f())
            flat[i] = original
            grad_flat[i] = (plus - minus) / (2.0 * step)
    return grad


def assert_params_equal(p1, p2, path="params"):
    """Recursive equality of serialized parameters (dicts, lists and floats).

    Lists are compared element by element, so ragged nestings such as the
    per-layer weights of a network are supported.
    """
    if isinstance(p1, dict):
        assert isinstance(p2, dict), f"{path}: {type(p2)} is not a dict"
        assert set(p1) == set(p2), f"{path}: keys {set(p1)} != {set(p2)}"
        for key in p1:
            assert_params_equal(p1[key], p2[key], f"{path}.{key}")
    elif isinstance(p1, (list, tuple)):
        assert isinstance(p2, (list, tuple)), f"{path}: {type(p2)} is not a list"
        assert len(p1) == len(p2), f"{path}: length {len(p1)} != {len(p2)}"
        for i, (a, b) in enumerate(zip(p1, p2)):
            assert_params_equal(a, b, f"{path}[{i}]")
    elif isinstance(p1, np.ndarray):
        np.testing.assert_array_equal(p1, np.asarray(p2), err_msg=path)
    else:
        assert p1 == p2, f"{path}: {p1!r} != {p2!r}"


def assert_trajectory_equal(t1, t2):
    assert t1.domain == t2.domain
    np.testing.assert_array_equal(t1.z, t2.z)
    np.testing.assert_array_equal(t1.adjacency, t2.adjacency)
    assert_params_equal(t1.transition_params, t2.transition_params)


def assert_dataset_equal(d1, d2):
    assert d1.spec == d2.spec
    np.testing.assert_array_equal(d1.x, d2.x)
    np.testing.assert_array_equal(d1.z, d2.z)
    np.testing.assert_array_equal(d1.domains, d2.domains)
    np.testing.assert_array_equal(d1.adjacency, d2.adjacency)
    assert d1.mixing.slope == d2.mixing.slope
    for w1, w2 in zip(d1.mixing.weights, d2.mixing.weights):
        np.testing.assert_array_equal(w1, w2)
    for b1, b2 in zip(d1.mixing.biases, d2.mixing.biases):
        np.testing.assert_array_equal(b1, b2)
    assert len(d1.transition_params) == len(d2.transition_params)
    for p1, p2 in zip(d1.transition_params, d2.transition_params):
        assert_params_equal(p1, p2)
    for name in ("latent_offset", "latent_scale"):
        a1, a2 = getattr(d1, name), getattr(d2, name)
        if a1 is None:
            assert a2 is None, name
        else:
            np.testing.assert_array_equal(a1, a2, err_msg=name)
