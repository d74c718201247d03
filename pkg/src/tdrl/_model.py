import math

import attr
import torch
from torch import nn

from ._errors import DataError, DomainError, SpecError

PRIORS = ("modular", "standard_normal")
LOG_VAR_BOUND = 10.0
LEAKY_SLOPE = 0.2
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _positive(instance, attribute, value):
    if not value > 0:
        raise SpecError(
            f"`{attribute.name}` must be positive, got {value}", attribute.name
        )


@attr.s(slots=True, frozen=True)
class ModelConfig:
    """Architecture of the TDRL model.

    # Arguments:
        n (int): Latent dimension.
        lags (int): Number of lags `L` the transition prior conditions on.
        partition ((int, int, int)): Sizes of the fixed, changing and
            observation blocks. Defaults to `(n, 0, 0)`.
        theta_dyn_dim, theta_obs_dim (int): Widths of the change-factor
            embeddings of the dynamics and observation blocks.
        num_domains (int): Number of domains `m`.
        obs_dim (int | None): Observation dimension, defaults to `n`.
        enc_dec_width (int): Hidden width of encoder and decoder.
        flow_width (int): Hidden width of the per-component conditioner networks.
        beta (float): KL weight.
        prior (str): `modular` for the conditional-flow transition prior,
            `standard_normal` for the ablation without temporal prior.
    """

    n = attr.ib(converter=int, validator=_positive)
    lags = attr.ib(default=2, converter=int, validator=_positive)
    partition = attr.ib(default=None)
    theta_dyn_dim = attr.ib(default=2, converter=int)
    theta_obs_dim = attr.ib(default=2, converter=int)
    num_domains = attr.ib(default=1, converter=int, validator=_positive)
    obs_dim = attr.ib(default=None)
    enc_dec_width = attr.ib(default=128, converter=int, validator=_positive)
    flow_width = attr.ib(default=64, converter=int, validator=_positive)
    beta = attr.ib(default=0.002, converter=float, validator=_positive)
    prior = attr.ib(default="modular", validator=attr.validators.in_(PRIORS))

    def __attrs_post_init__(self):
        partition = (self.n, 0, 0) if self.partition is None else self.partition
        partition = tuple(int(size) for size in partition)
        object.__setattr__(self, "partition", partition)
        obs_dim = self.n if self.obs_dim is None else int(self.obs_dim)
        object.__setattr__(self, "obs_dim", obs_dim)
        if len(partition) != 3 or min(partition) < 0 or sum(partition) != self.n:
            raise SpecError(
                f"partition {partition} does not split n={self.n} into three blocks",
                "model.partition",
            )
        if partition[1] > 0 and self.theta_dyn_dim < 1:
            raise SpecError(
                "a changing block needs theta_dyn_dim >= 1", "model.theta_dyn_dim"
            )
        if partition[2] > 0 and self.theta_obs_dim < 1:
            raise SpecError(
                "an observation block needs theta_obs_dim >= 1", "model.theta_obs_dim"
            )

    @classmethod
    def for_dataset(cls, dataset, **overrides):
        """Config matching the shapes, partition and domains of `dataset`."""
        spec = dataset.spec
        fields = {
            "n": spec.n,
            "lags": spec.lags,
            "partition": spec.partition,
            "num_domains": spec.num_domains,
            "obs_dim": dataset.x.shape[-1],
        }
        fields.update(overrides)
        return cls(**fields)

    def to_dict(self):
        return attr.asdict(self, retain_collection_types=False)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@attr.s(slots=True, frozen=True, eq=False)
class PosteriorStats:
    """Diagonal Gaussian posterior `q(z_t | x_t)` per time step."""

    mu = attr.ib()
    log_var = attr.ib()


@attr.s(slots=True, frozen=True, eq=False)
class PriorOutput:
    """Estimated noises of the transition prior for the steps `t >= L`.

    # Arguments:
        eps_hat (torch.Tensor): `[..., T - L, n]`.
        log_jac (torch.Tensor): `[..., T - L, n]`, the log absolute diagonal of
            the Jacobian of the inverse transitions.
        log_prior (torch.Tensor): `[..., T - L]`, the sum over components of
            `log p_eps(eps_hat) + log_jac`.
    """

    eps_hat = attr.ib()
    log_jac = attr.ib()
    log_prior = attr.ib()


def standard_normal_log_pdf(x):
    return -0.5 * x**2 - HALF_LOG_2PI


def _mlp(in_dim, width, out_dim, hidden_layers=3):
    layers = []
    for _ in range(hidden_layers):
        layers += [nn.Linear(in_dim, width), nn.LeakyReLU(LEAKY_SLOPE)]
        in_dim = width
    layers.append(nn.Linear(in_dim, out_dim))
    return nn.Sequential(*layers)


class ChangeFactors(nn.Module):
    """Learned per-domain embeddings `theta_dyn [m, d_dyn]` and
    `theta_obs [m, d_obs]`."""

    def __init__(self, num_domains, theta_dyn_dim, theta_obs_dim):
        super().__init__()
        self.theta_dyn = nn.Parameter(0.1 * torch.randn(num_domains, theta_dyn_dim))
        self.theta_obs = nn.Parameter(0.1 * torch.randn(num_domains, theta_obs_dim))

    @property
    def num_domains(self):
        return self.theta_dyn.shape[0]


class ComponentMLP(nn.Module):
    """`num_components` independent conditioner networks evaluated in parallel.

    Maps a shared conditioning input `[..., in_dim]` to `[..., num_components, 2]`
    holding `(log_scale, shift)` per component. The output layer starts at zero
    so that every inverse transition is the identity at initialization.
    """

    def __init__(self, num_components, in_dim, width):
        super().__init__()
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        shapes = [(in_dim, width), (width, width), (width, 2)]
        for i, (fan_in, fan_out) in enumerate(shapes):
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            scale = 0.0 if i == len(shapes) - 1 else bound
            weight = torch.empty(num_components, fan_in, fan_out).uniform_(-1.0, 1.0)
            bias = torch.empty(num_components, fan_out).uniform_(-1.0, 1.0)
            self.weights.append(nn.Parameter(scale * weight))
            self.biases.append(nn.Parameter(scale * bias))

    def forward(self, cond):
        h = torch.einsum("...i,cio->...co", cond, self.weights[0]) + self.biases[0]
        h = nn.functional.leaky_relu(h, LEAKY_SLOPE)
        h = torch.einsum("...ci,cio->...co", h, self.weights[1]) + self.biases[1]
        h = nn.functional.leaky_relu(h, LEAKY_SLOPE)
        return torch.einsum("...ci,cio->...co", h, self.weights[2]) + self.biases[2]


def _affine_inverse(conditioner, cond, z):
    """`eps = exp(log_s) * z + t` per component, with `log_jac = log_s`."""
    params = conditioner(cond)
    log_s, shift = params[..., 0], params[..., 1]
    return torch.exp(log_s) * z + shift, log_s


class TDRLModel(nn.Module):
    """Factorized encoder/decoder with a modular conditional-flow transition
    prior and per-domain change factors.

    # Arguments:
        config (ModelConfig): The architecture.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        n, lags = config.n, config.lags
        n_fix, n_chg, n_obs = config.partition
        self.encoder = _mlp(config.obs_dim, config.enc_dec_width, 2 * n)
        self.decoder = _mlp(n, config.enc_dec_width, config.obs_dim)
        self.change_factors = ChangeFactors(
            config.num_domains, config.theta_dyn_dim, config.theta_obs_dim
        )
        history_dim = lags * n
        self.fix_flow = (
            ComponentMLP(n_fix, history_dim, config.flow_width) if n_fix else None
        )
        self.chg_flow = (
            ComponentMLP(n_chg, history_dim + config.theta_dyn_dim, config.flow_width)
            if n_chg
            else None
        )
        self.obs_flow = (
            ComponentMLP(n_obs, config.theta_obs_dim, config.flow_width)
            if n_obs
            else None
        )

    def _check_last_dim(self, array, size, name):
        if array.shape[-1] != size:
            raise DataError(
                f"{name} has {array.shape[-1]} columns, the model expects {size}"
            )

    def encode(self, x):
        """Posterior statistics of every time step, computed from `x_t` alone.

        # Arguments:
            x (torch.Tensor): Observations `[..., obs_dim]`.

        # Returns:
            `PosteriorStats` with `mu` and `log_var` of shape `[..., n]`,
            `log_var` clamped to `[-10, 10]`.
        """
        self._check_last_dim(x, self.config.obs_dim, "x")
        mu, log_var = self.encoder(x).chunk(2, dim=-1)
        return PosteriorStats(mu, log_var.clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND))

    def decode(self, z_hat):
        """Per-step reconstruction `x_hat_t` of `z_hat [..., n]`."""
        self._check_last_dim(z_hat, self.config.n, "z_hat")
        return self.decoder(z_hat)

    def _domain_index(self, domain, batch_shape):
        domain = torch.as_tensor(domain, dtype=torch.long)
        num_domains = self.config.num_domains
        if torch.any((domain < 0) | (domain >= num_domains)):
            raise DomainError(
                f"domain index outside [0, {num_domains})",
                domain=domain.tolist(),
            )
        return domain.expand(batch_shape) if domain.dim() == 0 else domain

    def prior_log_density(self, z_hat, domain):
        """Log-density of the transition prior for every step `t >= L`.

        Each block is an affine inverse transition per component,
        `eps_k = exp(log_s_k) * z_{k,t} + t_k`, whose conditioner sees the
        flattened history (fixed block), the history and `theta_dyn[domain]`
        (changing block) or `theta_obs[domain]` alone (observation block).

        # Arguments:
            z_hat (torch.Tensor): Latents `[B, T, n]` (or `[T, n]`), `T > L`.
            domain (int | torch.Tensor): Domain index, scalar or one per sequence.

        # Returns:
            `PriorOutput`.

        # Raises:
            DomainError: if a domain lies outside `[0, m)`.
        """
        squeeze = z_hat.dim() == 2
        if squeeze:
            z_hat = z_hat.unsqueeze(0)
        self._check_last_dim(z_hat, self.config.n, "z_hat")
        batch, length, n = z_hat.shape
        lags = self.config.lags
        if length <= lags:
            raise DataError(f"sequence length {length} must exceed the lag {lags}")
        domain = self._domain_index(domain, (batch,))
        current = z_hat[:, lags:]

        if self.config.prior == "standard_normal":
            eps_hat, log_jac = current, torch.zeros_like(current)
        else:
            history = torch.stack(
                [z_hat[:, lags - tau : length - tau] for tau in range(1, lags + 1)],
                dim=2,
            ).flatten(start_dim=2)  # [B, T - L, L * n]
            n_fix, n_chg, n_obs = self.config.partition
            steps = length - lags
            eps_parts, jac_parts = [], []
            if n_fix:
                eps, log_s = _affine_inverse(
                    self.fix_flow, history, current[..., :n_fix]
                )
                eps_parts.append(eps)
                jac_parts.append(log_s)
            if n_chg:
                theta = self.change_factors.theta_dyn[domain]
                theta = theta[:, None, :].expand(batch, steps, theta.shape[-1])
                eps, log_s = _affine_inverse(
                    self.chg_flow,
                    torch.cat([history, theta], dim=-1),
                    current[..., n_fix : n_fix + n_chg],
                )
                eps_parts.append(eps)
                jac_parts.append(log_s)
            if n_obs:
                theta = self.change_factors.theta_obs[domain]
                theta = theta[:, None, :].expand(batch, steps, theta.shape[-1])
                eps, log_s = _affine_inverse(
                    self.obs_flow, theta, current[..., n_fix + n_chg :]
                )
                eps_parts.append(eps)
                jac_parts.append(log_s)
            eps_hat = torch.cat(eps_parts, dim=-1)
            log_jac = torch.cat(jac_parts, dim=-1)

        log_prior = (standard_normal_log_pdf(eps_hat) + log_jac).sum(dim=-1)
        if squeeze:
            eps_hat, log_jac, log_prior = eps_hat[0], log_jac[0], log_prior[0]
        return PriorOutput(eps_hat, log_jac, log_prior)

    def forward(self, x, domain, noise=None):
        """Encode, sample, decode and evaluate the prior in one pass.

        # Returns:
            A tuple `(stats, z_hat, x_hat, prior)`.
        """
        stats = self.encode(x)
        z_hat = reparameterized_sample(stats, noise)
        return stats, z_hat, self.decode(z_hat), self.prior_log_density(z_hat, domain)


def reparameterized_sample(stats, noise=None):
    """`z_hat = mu + exp(log_var / 2) * noise`, with standard normal `noise` drawn
    when it is not given."""
    if noise is None:
        noise = torch.randn_like(stats.mu)
    if noise.shape != stats.mu.shape:
        raise DataError(
            f"noise of shape {tuple(noise.shape)} does not match the posterior "
            f"of shape {tuple(stats.mu.shape)}"
        )
    return stats.mu + torch.exp(0.5 * stats.log_var) * noise
