import json

import attr

from ._errors import ConfigError, TDRLError
from ._evaluate import MCC_MODES
from ._model import ModelConfig
from ._sim import GeneratorSpec
from ._train import TrainConfig

SECTIONS = ("generator", "model", "train", "eval", "check")
# filled in from the dataset by `ModelConfig.for_dataset`
_DATASET_FIELDS = ("n", "lags", "partition", "num_domains", "obs_dim")


@attr.s(slots=True, frozen=True)
class EvalConfig:
    """Settings of the `eval` command.

    # Arguments:
        mode (str): Correlation used by the MCC.
        skeleton (bool): Whether to recover and score the lagged skeleton.
        threshold (float | None): Fixed skeleton threshold (knee if `None`).
        path_multiplier (float): Growth factor of the sparsity path penalty.
        hidden (int): Hidden width of the path regression.
        jobs (int | None): Processes used by the skeleton recovery.
        plot (bool): Whether to write the scatter plot.
    """

    mode = attr.ib(default="spearman", validator=attr.validators.in_(MCC_MODES))
    skeleton = attr.ib(default=True, converter=bool)
    threshold = attr.ib(default=None)
    path_multiplier = attr.ib(default=1.2, converter=float)
    hidden = attr.ib(default=32, converter=int)
    jobs = attr.ib(default=1)
    plot = attr.ib(default=True, converter=bool)


@attr.s(slots=True, frozen=True)
class CheckConfig:
    """Settings of the `check` command."""

    num_prev = attr.ib(default=64, converter=int)
    num_current = attr.ib(default=8, converter=int)
    step = attr.ib(default=1e-3, converter=float)
    threshold = attr.ib(default=1e-6, converter=float)
    seed = attr.ib(default=0, converter=int)


@attr.s(slots=True, frozen=True)
class RunConfig:
    """A parsed configuration document.

    `model` holds the model fields not derived from the dataset, it becomes a
    `ModelConfig` through `model_config(dataset)`.
    """

    generator = attr.ib(default=None)
    model = attr.ib(factory=dict)
    train = attr.ib(factory=TrainConfig)
    eval = attr.ib(factory=EvalConfig)
    check = attr.ib(factory=CheckConfig)

    def model_config(self, dataset):
        try:
            return ModelConfig.for_dataset(dataset, **self.model)
        except TDRLError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid `model`: {exc}", "model") from exc

    def snapshot(self):
        """All settings with defaults materialized, as plain JSON data."""
        return {
            "generator": None if self.generator is None else self.generator.to_dict(),
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "eval": attr.asdict(self.eval),
            "check": attr.asdict(self.check),
        }


def _check_keys(section, data, cls, exclude=()):
    if not isinstance(data, dict):
        raise ConfigError(f"section `{section}` must be an object", section)
    known = set(attr.fields_dict(cls)) - set(exclude)
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key `{section}.{key}`", f"{section}.{key}")


def _build(section, cls, data, exclude=()):
    _check_keys(section, data, cls, exclude)
    try:
        return cls(**data)
    except TDRLError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid `{section}`: {exc}", section) from exc


def _section(data, section):
    value = data.get(section) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"section `{section}` must be an object", section)
    return dict(value)


def _build_generator(data):
    _check_keys("generator", data, GeneratorSpec)
    if "family" not in data:
        raise ConfigError("missing required key `generator.family`", "generator.family")
    overrides = dict(data)
    family = overrides.pop("family")
    try:
        return GeneratorSpec.for_family(family, **overrides)
    except TDRLError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid `generator`: {exc}", "generator") from exc


def parse_config(data, seed=None):
    """Validate a configuration document.

    # Arguments:
        data (dict): The decoded document, with the optional sections
            `generator`, `model`, `train`, `eval` and `check`.
        seed (int | None): Overrides `generator.seed` and `train.seed`.

    # Returns:
        `RunConfig`.

    # Raises:
        ConfigError: naming the unknown, missing or invalid key.
    """
    if not isinstance(data, dict):
        raise ConfigError("the configuration must be an object")
    for section in data:
        if section not in SECTIONS:
            raise ConfigError(f"unknown section `{section}`", section)
    generator_data = _section(data, "generator")
    train_data = _section(data, "train")
    if seed is not None:
        generator_data["seed"] = seed
        train_data["seed"] = seed

    generator = None
    if "generator" in data:
        generator = _build_generator(generator_data)
    model = _section(data, "model")
    _check_keys("model", model, ModelConfig, exclude=_DATASET_FIELDS)
    return RunConfig(
        generator=generator,
        model=model,
        train=_build("train", TrainConfig, train_data),
        eval=_build("eval", EvalConfig, _section(data, "eval")),
        check=_build("check", CheckConfig, _section(data, "check")),
    )


def load_config(path, seed=None):
    """Read and validate the JSON configuration at `path`."""
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise ConfigError(f"configuration {path} is not valid JSON: {exc}") from exc
    return parse_config(data, seed)
