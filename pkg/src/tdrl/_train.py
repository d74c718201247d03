import copy
import logging
import time

import attr
import numpy as np
import torch
from torch.nn import functional as F
from torch.utils.data import DataLoader, TensorDataset

from ._data import split_indices
from ._errors import ConfigError, DataError, NumericalError, TDRLError
from ._model import (
    HALF_LOG_2PI,
    TDRLModel,
    reparameterized_sample,
    standard_normal_log_pdf,
)

logger = logging.getLogger(__name__)

PROGRESS_HEADER = "epoch,recon,kld,total"


def _at_least(minimum):
    def validator(instance, attribute, value):
        if value < minimum:
            raise ConfigError(
                f"`{attribute.name}` must be >= {minimum}, got {value}",
                f"train.{attribute.name}",
            )

    return validator


def _positive(instance, attribute, value):
    if not value > 0:
        raise ConfigError(
            f"`{attribute.name}` must be positive, got {value}",
            f"train.{attribute.name}",
        )


def _to_beta_grid(values):
    if isinstance(values, (int, float)):
        values = [values]
    return tuple(float(value) for value in values)


@attr.s(slots=True, frozen=True)
class TrainConfig:
    """Optimization settings.

    # Arguments:
        lr (float): AdamW learning rate.
        batch (int): Sequences per mini-batch.
        max_epochs (int): Maximum number of epochs.
        patience (int): Epochs without a decrease of the validation loss before
            training stops.
        beta_grid ([float]): KL weights tried by `select_beta`.
        mc_samples (int): Posterior draws per step for the KL estimate.
        seed (int): Seed of the split, the initialization and the sampling.
        val_fraction (float): Fraction of sequences held out for validation.
        weight_decay (float): AdamW weight decay.
    """

    lr = attr.ib(default=0.002, converter=float, validator=_positive)
    batch = attr.ib(default=64, converter=int, validator=_at_least(1))
    max_epochs = attr.ib(default=50, converter=int, validator=_at_least(1))
    patience = attr.ib(default=5, converter=int, validator=_at_least(1))
    beta_grid = attr.ib(default=(0.002,), converter=_to_beta_grid)
    mc_samples = attr.ib(default=1, converter=int, validator=_at_least(1))
    seed = attr.ib(default=0, converter=int)
    val_fraction = attr.ib(default=0.1, converter=float)
    weight_decay = attr.ib(default=1e-4, converter=float, validator=_at_least(0.0))

    def to_dict(self):
        return attr.asdict(self, retain_collection_types=False)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@attr.s(slots=True, frozen=True)
class EpochRecord:
    epoch = attr.ib()
    train_recon = attr.ib()
    train_kld = attr.ib()
    train_total = attr.ib()
    val_recon = attr.ib()
    val_kld = attr.ib()
    val_total = attr.ib()


@attr.s(slots=True, eq=False)
class TrainHistory:
    """Per-epoch losses of one training run.

    `best_epoch` indexes the record with the lowest validation loss and
    `stop_reason` is `max_epochs` or `early_stopping`.
    """

    records = attr.ib(factory=list)
    best_epoch = attr.ib(default=None)
    wall_time = attr.ib(default=0.0)
    stop_reason = attr.ib(default=None)

    @property
    def best_val_total(self):
        return self.records[self.best_epoch].val_total

    def to_rows(self):
        return [attr.astuple(record) for record in self.records]


@attr.s(slots=True, frozen=True, eq=False)
class Checkpoint:
    """The best-validation model state of a training run."""

    model_config = attr.ib()
    train_config = attr.ib()
    state_dict = attr.ib()
    best_epoch = attr.ib()
    val_indices = attr.ib()

    @property
    def beta(self):
        return self.model_config.beta

    def build_model(self):
        """A `TDRLModel` in evaluation mode holding the checkpoint parameters."""
        model = TDRLModel(self.model_config)
        dtype = next(iter(self.state_dict.values())).dtype
        model.to(dtype)
        model.load_state_dict(self.state_dict)
        return model.eval()


@attr.s(slots=True, frozen=True, eq=False)
class BetaTrial:
    """Outcome of training with one value of the beta grid; `error` is set when
    the run failed."""

    beta = attr.ib()
    history = attr.ib(default=None)
    checkpoint = attr.ib(default=None)
    error = attr.ib(default=None)


def _gaussian_log_pdf(z, mu, log_var):
    return -0.5 * (z - mu) ** 2 * torch.exp(-log_var) - 0.5 * log_var - HALF_LOG_2PI


def mc_kld(stats, prior, z_hat):
    """Sampled KL estimate `log q(z_hat | x) - log p(z_hat)` for one draw.

    The first `L` steps, which have no history, are scored under a standard
    normal prior. The estimate is averaged over steps and components, then over
    the batch.

    # Arguments:
        stats (PosteriorStats): Posterior of shape `[B, T, n]` (or `[T, n]`).
        prior (PriorOutput): The prior evaluated at `z_hat`.
        z_hat (torch.Tensor): The draw from `stats`.
    """
    if z_hat.shape != stats.mu.shape:
        raise DataError("z_hat does not match the posterior shape")
    if z_hat.dim() == 2:
        z_hat = z_hat[None]
        stats_mu, stats_log_var = stats.mu[None], stats.log_var[None]
        log_prior = prior.log_prior[None]
    else:
        stats_mu, stats_log_var = stats.mu, stats.log_var
        log_prior = prior.log_prior
    _, length, n = z_hat.shape
    lags = length - log_prior.shape[-1]
    log_q = _gaussian_log_pdf(z_hat, stats_mu, stats_log_var).sum(dim=(-2, -1))
    log_p = standard_normal_log_pdf(z_hat[:, :lags]).sum(dim=(-2, -1))
    log_p = log_p + log_prior.sum(dim=-1)
    return ((log_q - log_p) / (length * n)).mean()


def elbo_step(model, x, domains, beta, mc_samples=1, noise=None):
    """Negative ELBO of a batch: `total = recon + beta * kld`.

    `recon` is the mean squared reconstruction error and `kld` the sampled KL
    estimate averaged over `mc_samples` posterior draws.

    # Arguments:
        model (TDRLModel): The model.
        x (torch.Tensor): Observations `[B, T, obs_dim]`.
        domains (torch.Tensor | int): Domain of every sequence.
        beta (float): KL weight, `>= 0`.
        noise (torch.Tensor | None): Fixed standard normal draws
            `[mc_samples, B, T, n]`.

    # Returns:
        A dict of scalar tensors `recon`, `kld` and `total`.

    # Raises:
        NumericalError: naming the loss term that is not finite.
    """
    if x.shape[-2] < model.config.lags + 2:
        raise DataError("sequences must hold at least L + 2 steps")
    stats = model.encode(x)
    recon = kld = 0.0
    for sample in range(mc_samples):
        z_hat = reparameterized_sample(
            stats, None if noise is None else noise[sample]
        )
        recon = recon + F.mse_loss(model.decode(z_hat), x)
        kld = kld + mc_kld(stats, model.prior_log_density(z_hat, domains), z_hat)
    losses = {"recon": recon / mc_samples, "kld": kld / mc_samples}
    for name, value in losses.items():
        if not torch.isfinite(value):
            raise NumericalError(f"{name} loss is not finite", term=name)
    losses["total"] = losses["recon"] + beta * losses["kld"]
    return losses


def _tensors(dataset, indices, dtype):
    x = torch.as_tensor(dataset.x[indices], dtype=dtype)
    domains = torch.as_tensor(dataset.domains[indices], dtype=torch.long)
    return x, domains


def evaluate_elbo(model, x, domains, beta, seed=0, batch_size=256):
    """Negative ELBO terms of a whole split, with noise drawn from a generator
    seeded with `seed` so that repeated evaluations agree exactly."""
    generator = torch.Generator().manual_seed(seed)
    sums = {"recon": 0.0, "kld": 0.0, "total": 0.0}
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            x_batch = x[start : start + batch_size]
            shape = (1,) + x_batch.shape[:-1] + (model.config.n,)
            noise = torch.randn(shape, generator=generator, dtype=x.dtype)
            losses = elbo_step(
                model, x_batch, domains[start : start + batch_size], beta, 1, noise
            )
            for name, value in losses.items():
                sums[name] += value.item() * x_batch.shape[0]
    model.train(was_training)
    return {name: value / x.shape[0] for name, value in sums.items()}


def _check_compatible(dataset, model_config):
    if dataset.x.shape[-1] != model_config.obs_dim:
        raise ConfigError(
            f"dataset has {dataset.x.shape[-1]} observed dimensions, the model "
            f"expects {model_config.obs_dim}",
            "model.obs_dim",
        )
    n_fix, n_chg, n_obs = model_config.partition
    if n_chg or n_obs:
        if dataset.domains is None or model_config.num_domains < 2:
            raise ConfigError(
                "a changing or observation block needs domain labels from at "
                "least two domains",
                "model.partition",
            )
        if int(np.max(dataset.domains)) >= model_config.num_domains:
            raise ConfigError(
                f"dataset has domain labels beyond num_domains="
                f"{model_config.num_domains}",
                "model.num_domains",
            )
    if dataset.x.shape[1] < model_config.lags + 2:
        raise DataError("sequences must hold at least L + 2 steps")


def train(dataset, model_config, train_config, progress=None):
    """Fit a `TDRLModel` to `dataset` with AdamW and early stopping.

    Training is deterministic given the seeds when torch runs single-threaded.

    # Arguments:
        dataset (ObservedDataset): The observations and their domain labels.
        model_config (ModelConfig): Architecture, including the KL weight `beta`.
        train_config (TrainConfig): Optimization settings.
        progress (file-like | None): Receives one `epoch,recon,kld,total` CSV
            line of validation losses per epoch.

    # Returns:
        A tuple `(checkpoint, history)`.

    # Raises:
        ConfigError: if the dataset does not match the model configuration.
        NumericalError: if a loss becomes non-finite.
    """
    _check_compatible(dataset, model_config)
    started = time.perf_counter()
    torch.manual_seed(train_config.seed)
    train_idx, val_idx = split_indices(
        dataset.num_seqs, train_config.val_fraction, train_config.seed
    )
    if len(val_idx) == 0:
        val_idx = train_idx
    dtype = torch.get_default_dtype()
    x_train, d_train = _tensors(dataset, train_idx, dtype)
    x_val, d_val = _tensors(dataset, val_idx, dtype)
    loader = DataLoader(
        TensorDataset(x_train, d_train),
        batch_size=train_config.batch,
        shuffle=True,
        generator=torch.Generator().manual_seed(train_config.seed),
    )

    model = TDRLModel(model_config)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay
    )
    beta = model_config.beta
    history = TrainHistory()
    best_state, bad_epochs = None, 0
    if progress is not None:
        print(PROGRESS_HEADER, file=progress, flush=True)

    for epoch in range(train_config.max_epochs):
        model.train()
        sums, count = {"recon": 0.0, "kld": 0.0, "total": 0.0}, 0
        for x_batch, d_batch in loader:
            losses = elbo_step(model, x_batch, d_batch, beta, train_config.mc_samples)
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            for name, value in losses.items():
                sums[name] += value.item() * x_batch.shape[0]
            count += x_batch.shape[0]
        val = evaluate_elbo(model, x_val, d_val, beta, seed=train_config.seed)
        history.records.append(
            EpochRecord(
                epoch,
                sums["recon"] / count,
                sums["kld"] / count,
                sums["total"] / count,
                val["recon"],
                val["kld"],
                val["total"],
            )
        )
        if progress is not None:
            print(
                f"{epoch},{val['recon']!r},{val['kld']!r},{val['total']!r}",
                file=progress,
                flush=True,
            )
        logger.info("epoch %d: validation loss %.6g", epoch, val["total"])

        if history.best_epoch is None or val["total"] < history.best_val_total:
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_config.patience:
                history.stop_reason = "early_stopping"
                logger.info("stopping early after epoch %d", epoch)
                break
    else:
        history.stop_reason = "max_epochs"

    history.wall_time = time.perf_counter() - started
    checkpoint = Checkpoint(
        model_config=model_config,
        train_config=train_config,
        state_dict=best_state,
        best_epoch=history.best_epoch,
        val_indices=np.asarray(val_idx, dtype=np.int64),
    )
    return checkpoint, history


def select_beta(dataset, model_config, train_config, progress=None):
    """Train one model per value of `train_config.beta_grid` and pick the value
    with the lowest best validation loss.

    Ties go to the first occurrence in the grid. A failing grid point is
    recorded in its `BetaTrial` and skipped.

    # Returns:
        A tuple `(best_beta, trials)`, `trials` a list of `BetaTrial`.

    # Raises:
        ConfigError: for an empty grid.
        TDRLError: the last failure, if every grid point fails.
    """
    if not train_config.beta_grid:
        raise ConfigError("beta_grid is empty", "train.beta_grid")
    trials, best, last_error = [], None, None
    for beta in train_config.beta_grid:
        config = attr.evolve(model_config, beta=beta)
        try:
            checkpoint, history = train(dataset, config, train_config, progress)
        except TDRLError as exc:
            logger.warning("training with beta=%g failed: %s", beta, exc)
            trials.append(BetaTrial(beta, error=exc))
            last_error = exc
            continue
        trial = BetaTrial(beta, history, checkpoint)
        trials.append(trial)
        if best is None or history.best_val_total < best.history.best_val_total:
            best = trial
    if best is None:
        raise last_error
    logger.info("selected beta=%g", best.beta)
    return best.beta, trials
