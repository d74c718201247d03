import functools
import logging

import attr
import numpy as np

from ._errors import DataError, ParameterError, SpecError

logger = logging.getLogger(__name__)

FAMILIES = (
    "heteronoise_fixed",
    "gaussian_additive",
    "linear_nongaussian",
    "changing_dynamics",
    "modular",
    "iid",
)
STATIONARY_FAMILIES = (
    "heteronoise_fixed",
    "gaussian_additive",
    "linear_nongaussian",
    "iid",
)

LEAKY_SLOPE = 0.2
# output standard deviation of a transition network on standard normal histories
TRANSITION_GAIN = 0.65
# norm of the coupling read-out, in units of the noise scale
COUPLING_STRENGTH = 0.5
CALIBRATION_SAMPLES = 4096
MAX_STABLE_ATTEMPTS = 100

_DEFAULT_NOISE = {
    "heteronoise_fixed": {"sigma": 0.1},
    "gaussian_additive": {"sigma": 0.1},
    "linear_nongaussian": {"beta": 4.0, "lam": 1.0},
    "changing_dynamics": {"sigma": 0.1},
    "modular": {"sigma": 0.1},
    "iid": {"sigma": 1.0},
}


def _non_negative(instance, attribute, value):
    if value < 0:
        raise SpecError(f"`{attribute.name}` must be >= 0, got {value}", attribute.name)


def _positive(instance, attribute, value):
    if value < 1:
        raise SpecError(f"`{attribute.name}` must be >= 1, got {value}", attribute.name)


def _default_partition(family, n):
    if family == "changing_dynamics":
        return (0, n, 0)
    if family == "modular":
        return (max(n - 3, 0), min(2, n), 1 if n >= 3 else 0)
    return (n, 0, 0)


@attr.s(slots=True, frozen=True)
class GeneratorSpec:
    """Full description of a synthetic latent process family.

    # Arguments:
        family (str): One of `FAMILIES`.
        n (int): Latent dimension.
        lags (int): Maximum time lag `L` (>= 1).
        length (int): Length `T` of every returned sequence window.
        num_seqs (int): Number of sequences *per domain*.
        num_domains (int): Number of domains `m` (1 for stationary families).
        partition ((int, int, int)): Block sizes `(n_fix, n_chg, n_obs)`. Defaults
            to the canonical partition of `family`.
        noise_params (dict): Family specific noise parameters: `sigma` for
            Gaussian noise (scalar or one value per component), `beta` and `lam`
            for the generalized normal noise of `linear_nongaussian`.
        edge_density (float): Probability of a lagged edge between two distinct
            components. Every component keeps its lag-1 self edge.
        hidden (int): Hidden width of the random transition networks.
        burn_in (int): Number of simulated steps discarded before the window.
        standardize (bool): Whether `generate_dataset` standardizes each latent
            component before mixing (the raw scale is recorded).
        seed (int): Seed of all randomness.
    """

    family = attr.ib(validator=attr.validators.in_(FAMILIES))
    n = attr.ib(converter=int, validator=_positive)
    lags = attr.ib(default=2, converter=int, validator=_positive)
    length = attr.ib(default=10, converter=int, validator=_positive)
    num_seqs = attr.ib(default=1000, converter=int, validator=_positive)
    num_domains = attr.ib(default=1, converter=int, validator=_positive)
    partition = attr.ib(default=None)
    noise_params = attr.ib(factory=dict, converter=dict)
    edge_density = attr.ib(default=1.0, converter=float)
    hidden = attr.ib(default=16, converter=int, validator=_positive)
    burn_in = attr.ib(default=50, converter=int, validator=_non_negative)
    standardize = attr.ib(default=True, converter=bool)
    seed = attr.ib(default=0, converter=int)

    def __attrs_post_init__(self):
        if self.partition is None:
            partition = _default_partition(self.family, self.n)
        else:
            partition = tuple(int(size) for size in self.partition)
        object.__setattr__(self, "partition", partition)
        if len(partition) != 3 or any(size < 0 for size in partition):
            raise SpecError(
                "partition must hold three non-negative block sizes",
                "partition",
                partition=partition,
            )
        if sum(partition) != self.n:
            raise SpecError(
                f"partition {partition} does not sum to n={self.n}", "partition"
            )
        if (partition[1] > 0 or partition[2] > 0) and self.num_domains < 2:
            raise SpecError(
                "changing or observation blocks require num_domains >= 2",
                "num_domains",
            )
        if not 0.0 < self.edge_density <= 1.0:
            raise SpecError("edge_density must lie in (0, 1]", "edge_density")
        if self.family == "linear_nongaussian":
            beta = self.noise_param("beta")
            if beta <= 2 or beta == 3:
                raise ParameterError(
                    f"linear_nongaussian requires beta > 2 and beta != 3, got {beta}",
                    "generator.noise_params.beta",
                )
            if self.noise_param("lam") <= 0:
                raise ParameterError(
                    "lam must be positive", "generator.noise_params.lam"
                )

    @classmethod
    def for_family(cls, family, **overrides):
        """Instantiate the spec with the defaults used for the synthetic benchmark
        of `family`: n=8 (9 for modular), L=2, 100,000 stationary points or
        7,500 points per domain over 20 domains."""
        defaults = {"n": 9 if family == "modular" else 8, "lags": 2, "length": 10}
        if family in STATIONARY_FAMILIES:
            defaults.update(num_seqs=10_000, num_domains=1)
        else:
            defaults.update(num_seqs=750, num_domains=20)
        if family == "modular":
            defaults["partition"] = (6, 2, 1)
        defaults.update(overrides)
        return cls(family=family, **defaults)

    @property
    def is_stationary(self):
        return self.family in STATIONARY_FAMILIES

    def noise_param(self, name):
        if name in self.noise_params:
            return self.noise_params[name]
        return _DEFAULT_NOISE[self.family][name]

    def to_dict(self):
        return attr.asdict(self, retain_collection_types=False)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@attr.s(slots=True, frozen=True, eq=False)
class LatentTrajectory:
    """Ground-truth latent sequences of one domain.

    # Arguments:
        z (np.ndarray): Latents of shape `[num_seqs, T, n]`.
        domain (int): The domain index `u_r` in `[0, m)`.
        adjacency (np.ndarray): Boolean `[n, n, L]`, `adjacency[i, j, tau - 1]` is
            true iff `z_{j, t - tau}` is a parent of `z_{i, t}`.
        transition_params (dict): The sampled transition weights (serializable).
    """

    z = attr.ib()
    domain = attr.ib(converter=int)
    adjacency = attr.ib()
    transition_params = attr.ib(factory=dict)


@attr.s(slots=True, frozen=True, eq=False)
class TransitionNet:
    """Random MLP `q(z_Hx)` with LeakyReLU hidden units.

    The history passed to `__call__` has shape `[..., L, n_src]` with index 0
    holding lag 1. With a `mask` of shape `[n_out, L, n_src]` every output
    component is evaluated on its own masked copy of the history, so that only
    its parents can influence it.
    """

    weights = attr.ib(converter=tuple)
    biases = attr.ib(converter=tuple)
    mask = attr.ib(default=None)
    slope = attr.ib(default=LEAKY_SLOPE)

    @classmethod
    def random(
        cls,
        rng,
        n_src,
        n_out,
        lags,
        hidden,
        mask=None,
        gain=TRANSITION_GAIN,
        uniform_first=False,
    ):
        """Draw a bias-free network with orthogonal weights and calibrate it.

        Without biases the network is positively homogeneous, `q(c h) = c q(h)`
        for `c > 0`, so the simulated process fluctuates around the origin at
        the scale set by its noise.

        # Arguments:
            rng (np.random.Generator): Source of the weights.
            n_src, n_out (int): Input components per lag and output components.
            lags (int): Number of lags `L` in the history.
            hidden (int): Width of both hidden layers.
            mask (np.ndarray | None): Boolean `[n_out, L, n_src]` parent mask.
            gain (float): Standard deviation of every output component on i.i.d.
                standard normal histories.
            uniform_first (bool): Draw the first layer uniformly on `[-1, 1]`
                (the distribution of the per-domain redraws) instead of
                orthogonally.
        """
        shapes = [(lags * n_src, hidden), (hidden, hidden), (hidden, n_out)]
        if uniform_first:
            first = rng.uniform(-1.0, 1.0, size=shapes[0])
        else:
            first = _orthogonal(rng, *shapes[0])
        weights = [first] + [_orthogonal(rng, rows, cols) for rows, cols in shapes[1:]]
        biases = [np.zeros(cols) for _, cols in shapes]
        net = cls(weights=weights, biases=biases, mask=mask)
        history = rng.standard_normal((CALIBRATION_SAMPLES, lags, n_src))
        return net.rescaled(gain / np.maximum(net(history).std(axis=0), 1e-12))

    @property
    def n_out(self):
        return self.weights[-1].shape[1]

    def rescaled(self, scale):
        """Multiply output component `k` by `scale[k]`."""
        last = (self.weights[-1] * scale, self.biases[-1] * scale)
        return attr.evolve(
            self,
            weights=self.weights[:-1] + last[:1],
            biases=self.biases[:-1] + last[1:],
        )

    def __call__(self, history):
        history = np.asarray(history, dtype=float)
        lead = history.shape[:-2]
        if self.mask is None:
            return self._mlp(history.reshape(lead + (-1,)))
        masked = history[..., None, :, :] * self.mask
        out = self._mlp(masked.reshape(lead + (self.n_out, -1)))
        return np.diagonal(out, axis1=-2, axis2=-1)

    def _mlp(self, h):
        last = len(self.weights) - 1
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            h = h @ weight + bias
            if i < last:
                h = np.where(h > 0, h, self.slope * h)
        return h

    def to_dict(self):
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "mask": None if self.mask is None else self.mask.tolist(),
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            weights=[np.asarray(w, dtype=float) for w in data["weights"]],
            biases=[np.asarray(b, dtype=float) for b in data["biases"]],
            mask=None if data["mask"] is None else np.asarray(data["mask"], bool),
            slope=data["slope"],
        )


def _orthogonal(rng, rows, cols):
    """(Semi-)orthogonal `[rows, cols]` matrix."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q


def sample_generalized_normal(beta, lam, count, seed=None):
    """Draw i.i.d. samples from the zero-mean generalized normal distribution
    with density proportional to `exp(-lam * |eps| ** beta)`.

    `|eps| = (G / lam) ** (1 / beta)` with `G ~ Gamma(1 / beta, 1)` and a uniform
    random sign.

    # Arguments:
        beta (float): Shape exponent, > 0.
        lam (float): Rate, > 0.
        count (int | tuple): Number (or shape) of samples.
        seed (int | np.random.Generator | None): Seed or generator.

    # Returns:
        A float array of shape `count`.

    # Raises:
        ParameterError: if `beta` or `lam` is not positive.
    """
    if beta <= 0:
        raise ParameterError(f"beta must be positive, got {beta}", "beta")
    if lam <= 0:
        raise ParameterError(f"lam must be positive, got {lam}", "lam")
    rng = np.random.default_rng(seed)
    magnitude = (rng.gamma(1.0 / beta, 1.0, size=count) / lam) ** (1.0 / beta)
    sign = rng.choice(np.array([-1.0, 1.0]), size=count)
    return sign * magnitude


def _draw_parent_mask(rng, n_out, n_src, lags, density, self_offset=0):
    """Boolean `[n_out, L, n_src]` parent mask, `None` for dense graphs."""
    if density >= 1.0:
        return None
    mask = rng.random((n_out, lags, n_src)) < density
    for i in range(n_out):
        if 0 <= i + self_offset < n_src:
            mask[i, 0, i + self_offset] = True
    return mask


def _mask_to_adjacency(mask, n_out, n_src, lags):
    if mask is None:
        return np.ones((n_out, n_src, lags), dtype=bool)
    return np.transpose(mask, (0, 2, 1)).copy()


def _sigmas(spec, size):
    sigma = np.broadcast_to(np.asarray(spec.noise_param("sigma"), float), (size,))
    if np.any(sigma < 0):
        raise ParameterError("sigma must be non-negative", "generator.noise_params")
    return sigma.copy()


def _draw_coupling(rng, n_out, n_src, lags, mask, sigma):
    """Random `[n_out, L, n_src]` read-out weights of the noise coupling.

    Row `k` is supported on the lagged parents of component `k` and has norm
    `COUPLING_STRENGTH / mean(sigma)`, so that the coupling varies on the scale
    the process itself fluctuates on.
    """
    weights = rng.standard_normal((n_out, lags, n_src))
    if mask is not None:
        weights = weights * mask
    norm = np.sqrt(np.sum(weights**2, axis=(1, 2), keepdims=True))
    scale = float(np.mean(sigma)) if np.any(sigma > 0) else 1.0
    return weights * (COUPLING_STRENGTH / (scale * norm))


def parent_coupling(history, weights):
    """Noise multiplier `s_k(z_Hx) = sqrt(1 + (w_k . z_Hx) ** 2)` of every
    component, with `weights` `[n_out, L, n_src]` from the simulator's
    transition parameters."""
    drive = np.einsum("...ls,kls->...k", history, np.asarray(weights, dtype=float))
    return np.sqrt(1.0 + drive**2)


def _gaussian_noise(sigma):
    def noise(rng, shape):
        return rng.standard_normal(shape) * sigma

    return noise


def _rollout(rng, spec, n, step):
    """Simulate `num_seqs` sequences with `step(history, rng) -> z_t`.

    The first `L` steps are i.i.d. standard normal, then `burn_in + length - L`
    steps are simulated and the last `length` steps are returned.
    """
    lags, total = spec.lags, spec.burn_in + spec.length
    if spec.length <= lags:
        raise DataError(
            f"sequence length must exceed the lag: length={spec.length}, L={lags}"
        )
    z = np.empty((spec.num_seqs, total, n))
    z[:, :lags] = rng.standard_normal((spec.num_seqs, lags, n))
    for t in range(lags, total):
        history = z[:, t - lags : t][:, ::-1]
        z[:, t] = step(history, rng)
    if not np.all(np.isfinite(z)):
        raise DataError("simulated latents are not finite", family=spec.family)
    return z[:, total - spec.length :]


def _require(spec, family, min_domains=1):
    if spec.family != family:
        raise SpecError(f"expected family {family!r}, got {spec.family!r}", "family")
    if spec.num_domains < min_domains:
        raise SpecError(
            f"{family} requires num_domains >= {min_domains}", "num_domains"
        )


def simulate_iid(spec, seed=None):
    """Latents without temporal dependence (no lagged parents)."""
    _require(spec, "iid")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    sigma = _sigmas(spec, spec.n)
    noise = _gaussian_noise(sigma)

    def step(history, rng):
        return noise(rng, history.shape[:1] + (spec.n,))

    z = _rollout(rng, spec, spec.n, step)
    adjacency = np.zeros((spec.n, spec.n, spec.lags), dtype=bool)
    return LatentTrajectory(z, 0, adjacency, {"sigma": sigma.tolist()})


def simulate_fixed_heteronoise(
    spec, seed=None, transition=None, coupling=None, noise=None
):
    """Heterogeneous noise process `z_t = q(z_Hx) + s(z_Hx) * eps_t`.

    `eps_t` is Gaussian with standard deviation `sigma` and the coupling
    `s_k = sqrt(1 + (w_k . z_Hx) ** 2)` (see `parent_coupling`) reads out the
    lagged parents of component `k` with its own random weights `w_k`, so the
    noise scale of every component depends on the history in its own way.

    # Arguments:
        spec (GeneratorSpec): A `heteronoise_fixed` spec with one domain.
        seed (int | None): Overrides `spec.seed`.
        transition, coupling, noise: Optional replacements for `q`, `s` and the
            noise sampler `noise(rng, shape)`.

    # Returns:
        `LatentTrajectory` whose parameters record the transition network and
        the coupling weights.
    """
    _require(spec, "heteronoise_fixed")
    if spec.num_domains != 1:
        raise SpecError(
            "heteronoise_fixed is stationary (num_domains=1)", "num_domains"
        )
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    mask = _draw_parent_mask(rng, spec.n, spec.n, spec.lags, spec.edge_density)
    net = TransitionNet.random(rng, spec.n, spec.n, spec.lags, spec.hidden, mask)
    sigma = _sigmas(spec, spec.n)
    weights = _draw_coupling(rng, spec.n, spec.n, spec.lags, mask, sigma)
    transition = net if transition is None else transition
    if coupling is None:
        coupling = functools.partial(parent_coupling, weights=weights)
    noise = _gaussian_noise(sigma) if noise is None else noise

    def step(history, rng):
        eps = noise(rng, history.shape[:1] + (spec.n,))
        return transition(history) + coupling(history) * eps

    z = _rollout(rng, spec, spec.n, step)
    params = {
        "transition": net.to_dict(),
        "coupling": weights.tolist(),
        "sigma": sigma.tolist(),
    }
    adjacency = _mask_to_adjacency(mask, spec.n, spec.n, spec.lags)
    return LatentTrajectory(z, 0, adjacency, params)


def simulate_gaussian_additive(spec, seed=None, transition=None, noise=None):
    """Additive Gaussian noise process `z_t = q(z_Hx) + eps_t`.

    The per-component noise variances are recorded as `noise_vars`.
    """
    _require(spec, "gaussian_additive")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    mask = _draw_parent_mask(rng, spec.n, spec.n, spec.lags, spec.edge_density)
    net = TransitionNet.random(rng, spec.n, spec.n, spec.lags, spec.hidden, mask)
    sigma = _sigmas(spec, spec.n)
    transition = net if transition is None else transition
    noise = _gaussian_noise(sigma) if noise is None else noise

    def step(history, rng):
        return transition(history) + noise(rng, history.shape[:1] + (spec.n,))

    z = _rollout(rng, spec, spec.n, step)
    params = {
        "transition": net.to_dict(),
        "sigma": sigma.tolist(),
        "noise_vars": (sigma**2).tolist(),
    }
    adjacency = _mask_to_adjacency(mask, spec.n, spec.n, spec.lags)
    return LatentTrajectory(z, 0, adjacency, params)


def _draw_stable_matrix(rng, n, density):
    for attempt in range(MAX_STABLE_ATTEMPTS):
        matrix = rng.uniform(-1.0, 1.0, size=(n, n)) / np.sqrt(n)
        if density < 1.0:
            keep = rng.random((n, n)) < density
            np.fill_diagonal(keep, True)
            matrix = matrix * keep
        rows_ok = np.all(np.max(np.abs(matrix), axis=1) >= 0.1)
        radius = np.max(np.abs(np.linalg.eigvals(matrix)))
        if rows_ok and radius <= 0.95:
            logger.debug("stable transition matrix after %d attempts", attempt + 1)
            return matrix
    raise SpecError(
        f"no stable transition matrix after {MAX_STABLE_ATTEMPTS} attempts",
        "edge_density",
    )


def simulate_linear_nongaussian(spec, seed=None, matrix=None, noise=None):
    """Linear process `z_t = C z_{t-1} + eps_t` with generalized normal noise.

    `C` is rejection-sampled until every row has an entry of magnitude >= 0.1
    and its spectral radius is <= 0.95.

    # Raises:
        SpecError: if no admissible `C` is found in 100 attempts.
    """
    _require(spec, "linear_nongaussian")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    if matrix is None:
        matrix = _draw_stable_matrix(rng, spec.n, spec.edge_density)
    matrix = np.asarray(matrix, dtype=float)
    beta, lam = spec.noise_param("beta"), spec.noise_param("lam")
    if noise is None:

        def noise(rng, shape):
            return sample_generalized_normal(beta, lam, shape, rng)

    def step(history, rng):
        return history[:, 0] @ matrix.T + noise(rng, history.shape[:1] + (spec.n,))

    z = _rollout(rng, spec, spec.n, step)
    adjacency = np.zeros((spec.n, spec.n, spec.lags), dtype=bool)
    adjacency[:, :, 0] = matrix != 0
    params = {"matrix": matrix.tolist(), "beta": beta, "lam": lam}
    return LatentTrajectory(z, 0, adjacency, params)


def _domain_streams(seed, num_domains):
    """One generator for the shared parameters and one per domain."""
    children = np.random.SeedSequence(seed).spawn(num_domains + 1)
    return [np.random.default_rng(child) for child in children]


def _redraw_first_layer(net, rng):
    first = rng.uniform(-1.0, 1.0, size=net.weights[0].shape)
    return attr.evolve(net, weights=(first,) + net.weights[1:])


def simulate_changing_dynamics(spec, seed=None):
    """Additive Gaussian noise processes whose first transition layer is redrawn
    uniformly on `[-1, 1]` in every domain.

    The shared layers are calibrated against a uniform first layer, so every
    domain's transition has roughly the output scale `TRANSITION_GAIN`.

    # Returns:
        A list of `LatentTrajectory`, one per domain.
    """
    _require(spec, "changing_dynamics", min_domains=2)
    shared, *streams = _domain_streams(
        spec.seed if seed is None else seed, spec.num_domains
    )
    mask = _draw_parent_mask(shared, spec.n, spec.n, spec.lags, spec.edge_density)
    base = TransitionNet.random(
        shared, spec.n, spec.n, spec.lags, spec.hidden, mask, uniform_first=True
    )
    sigma = _sigmas(spec, spec.n)
    noise = _gaussian_noise(sigma)
    adjacency = _mask_to_adjacency(mask, spec.n, spec.n, spec.lags)

    trajectories = []
    for domain, rng in enumerate(streams):
        net = _redraw_first_layer(base, rng)

        def step(history, rng, net=net):
            return net(history) + noise(rng, history.shape[:1] + (spec.n,))

        z = _rollout(rng, spec, spec.n, step)
        params = {"transition": net.to_dict(), "sigma": sigma.tolist()}
        trajectories.append(LatentTrajectory(z, domain, adjacency, params))
        logger.debug("simulated changing-dynamics domain %d", domain)
    return trajectories


def simulate_modular(spec, seed=None):
    """Modular distribution shift: a heteronoise fixed block, a changing-dynamics
    block with parents anywhere in the latent vector, and an observation block
    drawn i.i.d. per domain with domain-specific mean and variance.

    The fixed block only reads its own history. Its transition, coupling and
    noise are shared by all domains, so its marginal distribution does not
    depend on the domain and it has no parents in the other blocks.

    # Returns:
        A list of `LatentTrajectory`, one per domain.

    # Raises:
        SpecError: if the partition has no changing or observation block.
    """
    _require(spec, "modular", min_domains=2)
    n_fix, n_chg, n_obs = spec.partition
    if n_chg + n_obs == 0:
        raise SpecError(
            "modular family needs a changing or observation block", "partition"
        )
    n, lags = spec.n, spec.lags
    shared, *streams = _domain_streams(
        spec.seed if seed is None else seed, spec.num_domains
    )
    fix_mask = _draw_parent_mask(shared, n_fix, n_fix, lags, spec.edge_density)
    chg_mask = _draw_parent_mask(shared, n_chg, n, lags, spec.edge_density, n_fix)
    sigma = _sigmas(spec, n)
    fix_net = chg_base = fix_coupling = None
    if n_fix:
        fix_net = TransitionNet.random(
            shared, n_fix, n_fix, lags, spec.hidden, fix_mask
        )
        fix_coupling = _draw_coupling(
            shared, n_fix, n_fix, lags, fix_mask, sigma[:n_fix]
        )
    if n_chg:
        chg_base = TransitionNet.random(
            shared, n, n_chg, lags, spec.hidden, chg_mask, uniform_first=True
        )
    fix_noise = _gaussian_noise(sigma[:n_fix])
    chg_noise = _gaussian_noise(sigma[n_fix : n_fix + n_chg])

    adjacency = np.zeros((n, n, lags), dtype=bool)
    if n_fix:
        adjacency[:n_fix, :n_fix] = _mask_to_adjacency(fix_mask, n_fix, n_fix, lags)
    if n_chg:
        adjacency[n_fix : n_fix + n_chg] = _mask_to_adjacency(chg_mask, n_chg, n, lags)

    trajectories = []
    for domain, rng in enumerate(streams):
        chg_net = _redraw_first_layer(chg_base, rng) if n_chg else None
        obs_mean = rng.uniform(-1.0, 1.0, size=n_obs)
        obs_var = rng.uniform(0.01, 1.0, size=n_obs)

        def step(history, rng, chg_net=chg_net, obs_mean=obs_mean, obs_var=obs_var):
            size = history.shape[0]
            parts = []
            if n_fix:
                fix_history = history[..., :n_fix]
                scale = parent_coupling(fix_history, fix_coupling)
                parts.append(
                    fix_net(fix_history) + scale * fix_noise(rng, (size, n_fix))
                )
            if n_chg:
                parts.append(chg_net(history) + chg_noise(rng, (size, n_chg)))
            if n_obs:
                parts.append(
                    obs_mean + np.sqrt(obs_var) * rng.standard_normal((size, n_obs))
                )
            return np.concatenate(parts, axis=-1)

        z = _rollout(rng, spec, n, step)
        params = {
            "fix_transition": None if fix_net is None else fix_net.to_dict(),
            "fix_coupling": None if n_fix == 0 else fix_coupling.tolist(),
            "chg_transition": None if chg_net is None else chg_net.to_dict(),
            "obs_mean": obs_mean.tolist(),
            "obs_var": obs_var.tolist(),
            "sigma": sigma.tolist(),
        }
        trajectories.append(LatentTrajectory(z, domain, adjacency, params))
    return trajectories


_SIMULATORS = {
    "heteronoise_fixed": simulate_fixed_heteronoise,
    "gaussian_additive": simulate_gaussian_additive,
    "linear_nongaussian": simulate_linear_nongaussian,
    "changing_dynamics": simulate_changing_dynamics,
    "modular": simulate_modular,
    "iid": simulate_iid,
}


def simulate(spec, seed=None):
    """Simulate `spec` with the simulator of its family.

    # Returns:
        A list of `LatentTrajectory`, one per domain (a single element for the
        stationary families).
    """
    logger.info(
        "simulating %s: n=%d L=%d %d x %d steps in %d domain(s)",
        spec.family,
        spec.n,
        spec.lags,
        spec.num_seqs,
        spec.length,
        spec.num_domains,
    )
    result = _SIMULATORS[spec.family](spec, seed)
    if isinstance(result, LatentTrajectory):
        return [result]
    return result
