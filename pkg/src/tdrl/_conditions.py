import logging

import attr
import numpy as np
from scipy.special import gammaln
from sklearn.linear_model import Ridge
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import SplineTransformer

from ._errors import ConfigError, DataError, NumericalError, ParameterError
from ._sim import TransitionNet, parent_coupling

logger = logging.getLogger(__name__)

VERDICTS = ("independent", "dependent", "inconclusive")
DEFAULT_THRESHOLD = 1e-6
DEFAULT_STEP = 1e-3
INCONCLUSIVE_BAND = 10.0


@attr.s(slots=True, frozen=True, eq=False)
class DensityModel:
    """Conditional log-density of the latent transition.

    # Arguments:
        log_density (f: f(z_t, z_hx, domain) -> np.ndarray): Evaluates the
            per-component conditional log-densities
            `eta_k = log p(z_{k,t} | z_Hx, u)`. `z_t` has shape `[..., n]`, `z_hx`
            shape `[..., L, n]` (index 0 is lag 1) and the result shape `[..., n]`.
            Must be vectorized and re-entrant.
        n (int): Latent dimension.
        lags (int): Number of lags in `z_hx`.
        num_domains (int): Number of domains `m`.
    """

    log_density = attr.ib()
    n = attr.ib(converter=int)
    lags = attr.ib(default=1, converter=int)
    num_domains = attr.ib(default=1, converter=int)


@attr.s(slots=True, frozen=True, eq=False)
class ConditionReport:
    """Singular-value verdict on the linear independence of condition vectors.

    `verdict` is `dependent` iff `ratio < threshold`, `inconclusive` iff
    `threshold <= ratio < 10 * threshold` and `independent` otherwise.
    """

    matrix = attr.ib()
    singular_values = attr.ib()
    ratio = attr.ib(converter=float)
    verdict = attr.ib(validator=attr.validators.in_(VERDICTS))
    threshold = attr.ib(converter=float)
    lag = attr.ib(default=1)
    current_ratios = attr.ib(default=())

    @property
    def all_zero(self):
        return not np.any(self.matrix)

    def summary(self):
        """Key-value view used by the `check` command."""
        return {
            "verdict": self.verdict,
            "ratio": self.ratio,
            "threshold": self.threshold,
            "lag": self.lag,
            "all_zero_rows": self.all_zero,
            "rows": self.matrix.shape[0],
            "columns": self.matrix.shape[1],
            "singular_values": [float(s) for s in self.singular_values],
            "current_ratios": [float(r) for r in self.current_ratios],
        }


def _as_history(z_prev, lags):
    histories = np.asarray(z_prev, dtype=float)
    if histories.ndim == 2:
        histories = histories[:, None, :]
    if histories.ndim != 3 or histories.shape[0] == 0:
        raise DataError("z_prev must be a non-empty list of histories")
    if histories.shape[1] != lags:
        raise DataError(f"histories must hold {lags} lag(s)")
    return histories


def _partials(dm, z_t, z_prev, step, lag, domain):
    """Central finite-difference partials of `eta_k` at every history.

    # Returns:
        A tuple `(mixed, mixed3, d1, d2)`: `mixed[k, p, l]` is
        `d2 eta_k / dz_{k,t} dz_{l,t-lag}`, `mixed3[k, p, l]` is
        `d3 eta_k / dz_{k,t}^2 dz_{l,t-lag}`, `d1[k, p]` and `d2[k, p]` are the
        first and second derivatives in `z_{k,t}`.
    """
    n = dm.n
    z_t = np.asarray(z_t, dtype=float)
    histories = _as_history(z_prev, dm.lags)
    num_points = histories.shape[0]
    if not 1 <= lag <= dm.lags:
        raise ConfigError(f"lag must lie in [1, {dm.lags}]", "lag")
    if step <= 0:
        raise ParameterError("finite-difference step must be positive", "step")

    h_k = step * (1.0 + np.abs(z_t))  # [n]
    h_l = step * (1.0 + np.abs(histories[:, lag - 1, :]))  # [P, n]
    offsets = np.array([-1.0, 0.0, 1.0])

    # Stencil over (k, l, a, b, p): z_t shifted by a * h_k along k, the lag
    # block shifted by b * h_l along l.
    eye = np.eye(n)
    z_grid = (
        z_t
        + offsets[None, :, None] * (h_k[:, None, None] * eye[:, None, :])
    )  # [k, a, n]
    z_grid = np.broadcast_to(
        z_grid[:, None, :, None, None, :], (n, n, 3, 3, num_points, n)
    )
    shift = np.zeros((n, 3, num_points, dm.lags, n))
    shift[:, :, :, lag - 1, :] = (
        offsets[None, :, None, None]
        * h_l[None, None, :, :]
        * eye[:, None, None, :]
    )  # [l, b, p, L, n]
    hx_grid = histories[None, None, None, None] + shift[None, :, None]
    hx_grid = np.broadcast_to(hx_grid, (n, n, 3, 3, num_points, dm.lags, n))

    eta = np.asarray(dm.log_density(z_grid, hx_grid, domain), dtype=float)
    k_index = np.arange(n)
    f = eta[k_index, ..., k_index]  # [k, l, a, b, p]
    if not np.all(np.isfinite(f)):
        bad = np.argwhere(~np.isfinite(f))[0]
        raise NumericalError(
            "log-density is not finite at an evaluation point",
            point=int(bad[-1]),
            z_prev=histories[bad[-1]].tolist(),
        )

    hk = h_k[:, None, None]  # [k, 1, 1]
    hl = np.transpose(h_l)[None, :, :]  # [1, l, p]
    mixed = (f[:, :, 2, 2] - f[:, :, 2, 0] - f[:, :, 0, 2] + f[:, :, 0, 0]) / (
        4.0 * hk * hl
    )
    second_plus = f[:, :, 2, 2] - 2.0 * f[:, :, 1, 2] + f[:, :, 0, 2]
    second_minus = f[:, :, 2, 0] - 2.0 * f[:, :, 1, 0] + f[:, :, 0, 0]
    mixed3 = (second_plus - second_minus) / (2.0 * hl * hk**2)

    center = f[:, 0, :, 1]  # [k, a, p], no shift of the lag block
    d1 = (center[:, 2] - center[:, 0]) / (2.0 * h_k[:, None])
    d2 = (center[:, 2] - 2.0 * center[:, 1] + center[:, 0]) / h_k[:, None] ** 2
    # [k, l, p] -> [k, p, l]
    return np.transpose(mixed, (0, 2, 1)), np.transpose(mixed3, (0, 2, 1)), d1, d2


def _interleave(v_rows, vo_rows):
    rows = np.empty((2 * v_rows.shape[0], v_rows.shape[1]))
    rows[0::2] = v_rows
    rows[1::2] = vo_rows
    return rows


def stationary_condition_rows(
    dm, z_t, z_prev, step=DEFAULT_STEP, lag=1, domain=0
):
    """Sampled condition vectors `v_k` and `v°_k` of the fixed-dynamics case.

    Row `2k` holds `v_k` and row `2k + 1` holds `v°_k`, each evaluated at every
    history and flattened over `(p, l)`; linear independence of these
    `2n` functions of `z_{t-lag}` is approximated by linear independence of the
    sampled rows.

    # Arguments:
        dm (DensityModel): The conditional density.
        z_t (np.ndarray): The value `[n]` of `z_t` the vectors are evaluated at.
        z_prev (np.ndarray): Histories `[P, L, n]` (or `[P, n]` for
            `L = 1`).
        step (float): Relative finite-difference step, the step along a
            coordinate `c` is `step * (1 + |c|)`.
        lag (int): The lag block the mixed partials are taken against.
        domain (int): Domain passed to the density.

    # Returns:
        Array `[2n, P * n]`.

    # Raises:
        NumericalError: if the density is not finite at a history.
    """
    mixed, mixed3, _, _ = _partials(dm, z_t, z_prev, step, lag, domain)
    n = dm.n
    return _interleave(mixed.reshape(n, -1), mixed3.reshape(n, -1))


def nonstationary_condition_rows(dm, z_t, z_prev, step=DEFAULT_STEP, lag=1):
    """Sampled condition vectors `s_k` and `s°_k` of the changing-domain case.

    Per history, `s_k` concatenates `v_k(u_1), ..., v_k(u_m)` with the `m - 1`
    consecutive domain differences of `d2 eta_k / dz_{k,t}^2`, and `s°_k`
    concatenates `v°_k(u_r)` with the differences of `d eta_k / dz_{k,t}`.

    # Returns:
        Array `[2n, P * (n * m + m - 1)]`.

    # Raises:
        ConfigError: if the density has fewer than two domains.
    """
    if dm.num_domains < 2:
        raise ConfigError("nonstationary conditions need >= 2 domains", "num_domains")
    n = dm.n
    per_domain = [
        _partials(dm, z_t, z_prev, step, lag, domain)
        for domain in range(dm.num_domains)
    ]
    mixed = np.concatenate([p[0] for p in per_domain], axis=-1)  # [k, P, n*m]
    mixed3 = np.concatenate([p[1] for p in per_domain], axis=-1)
    d1 = np.stack([p[2] for p in per_domain], axis=-1)  # [k, P, m]
    d2 = np.stack([p[3] for p in per_domain], axis=-1)
    s_rows = np.concatenate([mixed, np.diff(d2, axis=-1)], axis=-1)
    so_rows = np.concatenate([mixed3, np.diff(d1, axis=-1)], axis=-1)
    return _interleave(s_rows.reshape(n, -1), so_rows.reshape(n, -1))


def linear_independence_verdict(rows, threshold=DEFAULT_THRESHOLD):
    """Decide linear independence of the sampled condition rows.

    The ratio of the smallest to the largest singular value is compared with
    `threshold`; fewer columns than rows counts as rank deficient.

    # Raises:
        DataError: for an empty matrix.
        NumericalError: for non-finite entries.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size == 0:
        raise DataError("condition rows are empty")
    if not np.all(np.isfinite(rows)):
        raise NumericalError("condition rows contain non-finite entries")
    singular_values = np.linalg.svd(rows, compute_uv=False)
    if rows.shape[1] < rows.shape[0]:
        padding = np.zeros(rows.shape[0] - rows.shape[1])
        singular_values = np.concatenate([singular_values, padding])
    largest = singular_values[0]
    ratio = 0.0 if largest == 0 else singular_values[-1] / largest
    if ratio < threshold:
        verdict = "dependent"
    elif ratio < INCONCLUSIVE_BAND * threshold:
        verdict = "inconclusive"
    else:
        verdict = "independent"
    return ConditionReport(rows, singular_values, ratio, verdict, threshold)


def check_conditions(
    dm,
    samples,
    num_prev=64,
    num_current=8,
    step=DEFAULT_STEP,
    threshold=DEFAULT_THRESHOLD,
    seed=0,
):
    """Run the condition check at points drawn from latent samples.

    Histories and values of `z_t` are drawn from the empirical distribution
    of `samples`. For every lag the worst (smallest) ratio over the `z_t` values
    is taken; the condition holds if it holds for one lag, so the report of the
    best lag is returned, with the ratio of every `z_t` value.

    # Arguments:
        dm (DensityModel): The conditional density.
        samples (np.ndarray): Latents `[S, T, n]` (or `[T, n]`) on the scale of
            `dm`, with `T > dm.lags`.
        num_prev (int): Number `P` of histories.
        num_current (int): Number of `z_t` values.

    # Returns:
        `ConditionReport`.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 2:
        samples = samples[None]
    num_seqs, length, _ = samples.shape
    if length <= dm.lags:
        raise DataError("samples are too short to hold a full history")
    rng = np.random.default_rng(seed)

    def draw_windows(count):
        seq = rng.integers(num_seqs, size=count)
        t = rng.integers(dm.lags, length, size=count)
        lagged = t[:, None] - np.arange(1, dm.lags + 1)[None, :]
        return samples[seq[:, None], lagged], samples[seq, t]

    z_prev, _ = draw_windows(num_prev)
    _, currents = draw_windows(num_current)

    best = None
    for lag in range(1, dm.lags + 1):
        reports = []
        for z_t in currents:
            if dm.num_domains >= 2:
                rows = nonstationary_condition_rows(dm, z_t, z_prev, step, lag)
            else:
                rows = stationary_condition_rows(dm, z_t, z_prev, step, lag)
            reports.append(linear_independence_verdict(rows, threshold))
        worst = min(reports, key=lambda report: report.ratio)
        worst = attr.evolve(
            worst, lag=lag, current_ratios=tuple(r.ratio for r in reports)
        )
        logger.info("lag %d: worst ratio %.3g (%s)", lag, worst.ratio, worst.verdict)
        if best is None or worst.ratio > best.ratio:
            best = worst
    return best


def _gaussian_log_pdf(x, mean, std):
    return -0.5 * ((x - mean) / std) ** 2 - np.log(std) - 0.5 * np.log(2.0 * np.pi)


def _generalized_normal_log_pdf(x, beta, lam):
    log_norm = np.log(beta) + np.log(lam) / beta - np.log(2.0) - gammaln(1.0 / beta)
    return log_norm - lam * np.abs(x) ** beta


def closed_form_density(spec, transition_params, latent_offset=None, latent_scale=None):
    """Build the ground-truth `DensityModel` of a simulated process.

    # Arguments:
        spec (GeneratorSpec): The generator spec.
        transition_params ([dict]): The recorded parameters of every domain.
        latent_offset, latent_scale (np.ndarray | None): If given, the density is
            expressed for standardized latents `(z - offset) / scale`.

    # Returns:
        `DensityModel` with `num_domains = len(transition_params)`.
    """
    family = spec.family
    n_fix, n_chg, _ = spec.partition
    params = list(transition_params)
    sigma = np.asarray(params[0].get("sigma", 1.0), dtype=float)
    nets = {}
    for key in ("transition", "fix_transition", "chg_transition"):
        nets[key] = [
            None if p.get(key) is None else TransitionNet.from_dict(p[key])
            for p in params
        ]

    def raw_log_density(z_t, z_hx, domain):
        if family == "iid":
            return _gaussian_log_pdf(z_t, 0.0, sigma)
        if family == "heteronoise_fixed":
            net = nets["transition"][domain]
            std = parent_coupling(z_hx, params[domain]["coupling"]) * sigma
            return _gaussian_log_pdf(z_t, net(z_hx), std)
        if family in ("gaussian_additive", "changing_dynamics"):
            net = nets["transition"][domain]
            return _gaussian_log_pdf(z_t, net(z_hx), sigma)
        if family == "linear_nongaussian":
            matrix = np.asarray(params[domain]["matrix"], dtype=float)
            residual = z_t - z_hx[..., 0, :] @ matrix.T
            return _generalized_normal_log_pdf(
                residual, params[domain]["beta"], params[domain]["lam"]
            )
        # modular
        parts = []
        if n_fix:
            net = nets["fix_transition"][domain]
            fix_hx = z_hx[..., :n_fix]
            coupling = params[domain]["fix_coupling"]
            std = parent_coupling(fix_hx, coupling) * sigma[:n_fix]
            parts.append(_gaussian_log_pdf(z_t[..., :n_fix], net(fix_hx), std))
        if n_chg:
            net = nets["chg_transition"][domain]
            parts.append(
                _gaussian_log_pdf(
                    z_t[..., n_fix : n_fix + n_chg],
                    net(z_hx),
                    sigma[n_fix : n_fix + n_chg],
                )
            )
        obs = z_t[..., n_fix + n_chg :]
        if obs.shape[-1]:
            mean = np.asarray(params[domain]["obs_mean"])
            std = np.sqrt(np.asarray(params[domain]["obs_var"]))
            parts.append(_gaussian_log_pdf(obs, mean, std))
        return np.concatenate(parts, axis=-1)

    if latent_scale is None:
        log_density = raw_log_density
    else:
        offset = np.asarray(latent_offset, dtype=float)
        scale = np.asarray(latent_scale, dtype=float)

        def log_density(z_t, z_hx, domain):
            raw = raw_log_density(z_t * scale + offset, z_hx * scale + offset, domain)
            return raw + np.log(scale)

    return DensityModel(log_density, spec.n, spec.lags, len(params))


def density_from_dataset(dataset):
    """`closed_form_density` of an `ObservedDataset` (standardized latents)."""
    return closed_form_density(
        dataset.spec,
        dataset.transition_params,
        dataset.latent_offset,
        dataset.latent_scale,
    )


def gaussian_counterexample(z, noise_vars, seed=None, rotation=None, scales=None):
    """Alternative solution `z_hat = D1 U D2 z` of an additive Gaussian process.

    `D2 = diag(Var(eps_k) ** -1/2)`, `U` is a random orthogonal matrix and `D1` a
    random non-singular diagonal matrix; the components of `z_hat` remain
    mutually independent given the past although `z_hat` mixes the components
    of `z`.

    # Arguments:
        z (np.ndarray): Latents `[..., n]` of a `gaussian_additive` process.
        noise_vars (np.ndarray): The recorded noise variances `[n]`.
        seed (int | None): Seed of `U` and `D1`.
        rotation (np.ndarray | None): Fixes `U`.
        scales (np.ndarray | None): Fixes the diagonal of `D1`.

    # Raises:
        ParameterError: if a noise variance is not positive.
    """
    noise_vars = np.asarray(noise_vars, dtype=float)
    if np.any(noise_vars <= 0):
        raise ParameterError("noise variances must be positive", "noise_vars")
    n = noise_vars.shape[0]
    rng = np.random.default_rng(seed)
    if rotation is None:
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        rotation = q * np.sign(np.diag(r))
    if scales is None:
        scales = rng.uniform(0.5, 2.0, size=n) * rng.choice([-1.0, 1.0], size=n)
    transform = np.diag(scales) @ rotation @ np.diag(noise_vars**-0.5)
    return np.asarray(z, dtype=float) @ transform.T


def _lagged_design(traj, lags):
    traj = np.asarray(traj, dtype=float)
    if traj.ndim == 2:
        traj = traj[None]
    num_seqs, length, n = traj.shape
    targets = traj[:, lags:].reshape(-1, n)
    history = np.stack(
        [traj[:, lags - tau : length - tau] for tau in range(1, lags + 1)], axis=2
    )  # [S, T - L, L, n]
    return history.reshape(-1, lags * n), targets


def conditional_independence_score(traj, lags, n_knots=6, degree=3):
    """Absolute cross-correlations of the residuals of each component regressed
    on all lagged values with an additive spline-basis regression.

    # Arguments:
        traj (np.ndarray): Latents `[T, n]` or `[S, T, n]`.
        lags (int): Number of lags regressed on.

    # Returns:
        Array `[n, n]` with zero diagonal.

    # Raises:
        DataError: if there are fewer than `10 * n * lags` regression samples.
    """
    features, targets = _lagged_design(traj, lags)
    n = targets.shape[1]
    if targets.shape[0] < 10 * n * lags:
        raise DataError(
            "too few samples for the conditional independence score",
            samples=targets.shape[0],
            required=10 * n * lags,
        )
    regression = make_pipeline(
        SplineTransformer(n_knots=n_knots, degree=degree), Ridge(alpha=1e-6)
    )
    residuals = targets - regression.fit(features, targets).predict(features)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(residuals, rowvar=False)
    corr = np.nan_to_num(np.abs(np.atleast_2d(corr)))
    np.fill_diagonal(corr, 0.0)
    return corr
