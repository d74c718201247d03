import itertools
import logging
import os
import warnings
from multiprocessing import Pool

import attr
import numpy as np
import torch
from matplotlib.figure import Figure
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from ._errors import ConfigError, DataError, NumericalError, ParameterError

logger = logging.getLogger(__name__)

MCC_MODES = ("pearson", "spearman")
MAX_BRUTE_FORCE_DIM = 8
PATH_MULTIPLIER = 1.2
PATH_START_FRACTION = 1e-2
MIN_LAMBDA_MAX = 1e-3
MAX_PATH_LENGTH = 300
KNEE_TOLERANCE = 0.05


@attr.s(slots=True, frozen=True, eq=False)
class MCCReport:
    """Mean correlation coefficient after optimal matching.

    # Arguments:
        corr (np.ndarray): Absolute correlations `[n, n]`, rows index the true and
            columns the estimated components.
        assignment (np.ndarray): `assignment[k]` is the estimated component
            matched to true component `k`.
        mcc (float): `mean_k corr[k, assignment[k]]`.
        mode (str): `pearson` or `spearman`.
    """

    corr = attr.ib()
    assignment = attr.ib()
    mcc = attr.ib(converter=float)
    mode = attr.ib(validator=attr.validators.in_(MCC_MODES))


@attr.s(slots=True, frozen=True, eq=False)
class SkeletonReport:
    """Time-delayed skeleton recovered by sparse path regression.

    # Arguments:
        est_adjacency (np.ndarray): Boolean `[n, n, L]`,
            `est_adjacency[i, j, tau - 1]` is true iff `z_{j, t - tau}` is a
            recovered parent of `z_{i, t}`.
        scores (np.ndarray): `[n, n, L]`, the largest penalty of the path at which
            the input survives (0 if it never survives).
        threshold (np.ndarray): Threshold `[n]` per target component,
            `est_adjacency = scores > threshold[:, None, None]`.
        val_errors (np.ndarray): Validation error `[n, P]` along the path of every
            target, NaN padded.
        path (np.ndarray): The penalties `[n, P]` of every target, NaN padded.
        f1 (float | None): F1 against a ground truth, once compared.
    """

    est_adjacency = attr.ib()
    scores = attr.ib()
    threshold = attr.ib()
    val_errors = attr.ib()
    path = attr.ib()
    f1 = attr.ib(default=None)


def _pooled(z):
    z = np.asarray(z, dtype=float)
    if z.ndim < 2:
        raise DataError("latents must have a component axis")
    return z.reshape(-1, z.shape[-1])


def _standardized_columns(z, name):
    std = z.std(axis=0)
    constant = std == 0
    if np.any(constant):
        warnings.warn(
            f"{name} has constant columns {np.flatnonzero(constant).tolist()}; "
            "their correlations are set to 0",
            RuntimeWarning,
            stacklevel=3,
        )
    return (z - z.mean(axis=0)) / np.where(constant, 1.0, std)


def correlation_matrix(z_true, z_est, mode="spearman"):
    """Absolute correlations `[n, n]` of the pooled samples of two latent arrays.

    # Raises:
        DataError: for mismatched shapes or an unknown mode.
    """
    if mode not in MCC_MODES:
        raise DataError(f"unknown correlation mode {mode!r}")
    a, b = _pooled(z_true), _pooled(z_est)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mode == "spearman":
        a, b = rankdata(a, axis=0), rankdata(b, axis=0)
    a = _standardized_columns(a, "z_true")
    b = _standardized_columns(b, "z_est")
    return np.abs(a.T @ b) / a.shape[0]


def mcc(z_true, z_est, mode="spearman"):
    """Mean correlation coefficient of true and estimated latents, pooled over
    all sequences and time steps.

    # Arguments:
        z_true, z_est (np.ndarray): Latents `[..., n]` of equal shape.
        mode (str): `pearson` or `spearman`.

    # Returns:
        `MCCReport`.

    # Raises:
        DataError: for mismatched shapes or fewer than `10 n` samples.
    """
    corr = correlation_matrix(z_true, z_est, mode)
    n = corr.shape[0]
    if _pooled(z_true).shape[0] < 10 * n:
        raise DataError(f"MCC needs at least {10 * n} samples")
    rows, cols = linear_sum_assignment(-corr)
    assignment = np.empty(n, dtype=np.int64)
    assignment[rows] = cols
    return MCCReport(corr, assignment, corr[rows, cols].mean(), mode)


def brute_force_mcc(z_true, z_est, mode="spearman"):
    """Maximum over all permutations of the mean matched correlation.

    # Raises:
        DataError: for more than 8 components.
    """
    corr = correlation_matrix(z_true, z_est, mode)
    n = corr.shape[0]
    if n > MAX_BRUTE_FORCE_DIM:
        raise DataError(
            f"brute-force MCC is limited to {MAX_BRUTE_FORCE_DIM} components, got {n}"
        )
    rows = np.arange(n)
    return max(
        corr[rows, list(perm)].mean() for perm in itertools.permutations(range(n))
    )


def _lagged_features(z, lags):
    z = np.asarray(z, dtype=float)
    if z.ndim == 2:
        z = z[None]
    _, length, n = z.shape
    if length <= lags:
        raise DataError("sequences are too short for the requested lag")
    # lag-major features: column (tau - 1) * n + j holds z_{j, t - tau}
    features = np.concatenate(
        [z[:, lags - tau : length - tau] for tau in range(1, lags + 1)], axis=-1
    )
    return features.reshape(-1, lags * n), z[:, lags:].reshape(-1, n)


def hier_prox(theta, weight, penalty, hierarchy):
    """Proximal operator of the hierarchical penalty `penalty * |theta_j|` under
    the constraint `|W_j| <= hierarchy * |theta_j|`.

    # Arguments:
        theta (torch.Tensor): Skip-connection weights `[d]`.
        weight (torch.Tensor): First-layer weights `[d, K]` (one row per input).
        penalty (float): Step size times penalty.
        hierarchy (float): The hierarchy coefficient `M`.

    # Returns:
        The projected `(theta, weight)`.
    """
    m = hierarchy
    abs_sorted = torch.sort(weight.abs(), dim=1, descending=True).values
    zeros = torch.zeros_like(abs_sorted[:, :1])
    cumsum = torch.cat([zeros, torch.cumsum(abs_sorted, dim=1)], dim=1)  # [d, K+1]
    k = torch.arange(cumsum.shape[1], dtype=weight.dtype)
    w_norm = (
        m
        / (1.0 + k * m**2)
        * torch.clamp(theta.abs()[:, None] + m * cumsum - penalty, min=0.0)
    )
    upper = torch.cat([torch.full_like(zeros, float("inf")), abs_sorted], dim=1)
    lower = torch.cat([abs_sorted, zeros], dim=1)
    admissible = (lower <= w_norm) & (w_norm <= upper)
    index = torch.argmax(admissible.to(torch.int64), dim=1, keepdim=True)
    w_sel = torch.gather(w_norm, 1, index)  # [d, 1]
    new_theta = torch.sign(theta) * w_sel[:, 0] / m
    new_weight = torch.sign(weight) * torch.minimum(w_sel, weight.abs())
    return new_theta, new_weight


class _PathNet(torch.nn.Module):
    """One-hidden-layer network with a linear skip connection."""

    def __init__(self, in_dim, hidden):
        super().__init__()
        self.skip = torch.nn.Linear(in_dim, 1, bias=False)
        self.hidden = torch.nn.Linear(in_dim, hidden)
        self.out = torch.nn.Linear(hidden, 1)

    def forward(self, x):
        h = torch.nn.functional.relu(self.hidden(x))
        return (self.skip(x) + self.out(h))[:, 0]


def lambda_start(x, y, fraction=PATH_START_FRACTION):
    """First penalty of a data-scaled path.

    `fraction` times `max_j |2 x_j . y| / N`, the smallest penalty at which a lasso
    on the skip connection alone (mean squared error) keeps no input.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    lambda_max = 2.0 * np.max(np.abs(x.T @ y)) / len(y)
    return fraction * max(lambda_max, MIN_LAMBDA_MAX)


def _fit_target_path(args):
    """Fit the sparsity path of one target.

    The penalties of `path` are followed by geometrically growing ones until
    every input is removed.

    # Returns:
        `(importance, penalties, val_errors)`.

    # Raises:
        NumericalError: if inputs survive `max_path` penalties.
    """
    (
        x_train,
        y_train,
        x_val,
        y_val,
        path,
        multiplier,
        max_path,
        hidden,
        hierarchy,
        lr,
        steps,
        seed,
    ) = args
    if path is None:
        path = [lambda_start(x_train, y_train)]
    torch.manual_seed(seed)
    x_train = torch.as_tensor(x_train, dtype=torch.float64)
    y_train = torch.as_tensor(y_train, dtype=torch.float64)
    x_val = torch.as_tensor(x_val, dtype=torch.float64)
    y_val = torch.as_tensor(y_val, dtype=torch.float64)
    net = _PathNet(x_train.shape[1], hidden).double()
    loss_fn = torch.nn.MSELoss()

    dense = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(2 * steps):
        dense.zero_grad()
        loss_fn(net(x_train), y_train).backward()
        dense.step()

    importance = np.zeros(x_train.shape[1])
    penalties, val_errors = [], []
    optimizer = torch.optim.SGD(net.parameters(), lr=lr, momentum=0.9)
    for i in range(max_path):
        penalty = path[i] if i < len(path) else penalties[-1] * multiplier
        for _ in range(steps):
            optimizer.zero_grad()
            loss_fn(net(x_train), y_train).backward()
            optimizer.step()
            with torch.no_grad():
                theta, weight = hier_prox(
                    net.skip.weight[0], net.hidden.weight.T, lr * penalty, hierarchy
                )
                net.skip.weight[0] = theta
                net.hidden.weight.copy_(weight.T)
        with torch.no_grad():
            val_errors.append(loss_fn(net(x_val), y_val).item())
            alive = (net.skip.weight[0] != 0).numpy()
        penalties.append(float(penalty))
        importance[alive] = penalty
        if not alive.any():
            return importance, np.array(penalties), np.array(val_errors)
    raise NumericalError(
        f"{int(alive.sum())} input(s) survive the sparsity path",
        penalties=len(penalties),
        last_penalty=penalties[-1],
    )


def _knee_threshold(path, val_errors, baseline, tolerance):
    """Penalty just below the largest penalty whose validation error stays within
    `tolerance * baseline` of the best error along the path.

    Non-finite entries (padding or diverged fits) are ignored.

    # Raises:
        NumericalError: if no validation error is finite.
    """
    finite = np.flatnonzero(np.isfinite(val_errors) & np.isfinite(path))
    if len(finite) == 0:
        raise NumericalError("no finite validation error along the sparsity path")
    errors = val_errors[finite]
    knee = finite[errors <= errors.min() + tolerance * baseline][-1]
    return 0.0 if knee == 0 else path[knee - 1]


def thread_cap():
    """The positive thread cap set by `TDRL_THREADS`, `None` when unset.

    # Raises:
        ConfigError: if the variable is not an integer.
    """
    value = os.environ.get("TDRL_THREADS", "").strip()
    if not value:
        return None
    try:
        return max(int(value), 1)
    except ValueError:
        raise ConfigError(
            f"TDRL_THREADS must be an integer, got {value!r}", "TDRL_THREADS"
        ) from None


def _pool_size(jobs):
    if jobs is None:
        jobs = os.cpu_count() or 1
    cap = thread_cap()
    return jobs if cap is None else min(jobs, cap)


def _padded(rows):
    """Stack 1-d arrays of different lengths into `[len(rows), max_len]`, NaN
    padded."""
    out = np.full((len(rows), max(len(row) for row in rows)), np.nan)
    for i, row in enumerate(rows):
        out[i, : len(row)] = row
    return out


def recover_skeleton(
    z_est,
    lags,
    path=None,
    path_multiplier=PATH_MULTIPLIER,
    max_path=MAX_PATH_LENGTH,
    hidden=32,
    threshold=None,
    hierarchy=10.0,
    lr=1e-2,
    steps=100,
    val_fraction=0.2,
    max_samples=20_000,
    seed=0,
    jobs=1,
):
    """Recover the time-delayed skeleton of `z_est` by sparse path regression.

    Every component `z_{i,t}` is regressed on the standardized lagged values
    `z_{t-1}, ..., z_{t-L}` by a network with a linear skip connection whose
    first layer is tied to the skip weights by a hierarchical L1 penalty.
    The penalty starts at `lambda_start` of the target and grows by
    `path_multiplier` until every input is removed; the importance of an input
    is the last penalty at which it survives. An input is an edge if it
    survives beyond the knee of the validation error, so inputs that only
    leave at the very end of a flat path are not edges.

    # Arguments:
        z_est (np.ndarray): Latents `[T, n]` or `[S, T, n]`.
        lags (int): Number of lags `L`.
        path ([float] | None): Increasing initial penalties, continued
            geometrically. Defaults to the data-scaled start of every target.
        path_multiplier (float): Growth factor of the penalty, > 1.
        max_path (int): Maximum number of penalties per target.
        hidden (int): Hidden width.
        threshold (float | None): Fixed importance threshold. Defaults to the
            knee of each target's validation-error path.
        jobs (int | None): Number of processes fitting targets in parallel;
            `None` uses all CPUs (capped by `TDRL_THREADS`).

    # Returns:
        `SkeletonReport`. Its `path` and `val_errors` are `[n, P]`, NaN padded
        after the last penalty of every target.

    # Raises:
        DataError: for fewer than `20 n L` samples or a constant component.
        NumericalError: if a path does not remove every input.
    """
    features, targets = _lagged_features(z_est, lags)
    num_samples, n = targets.shape
    if num_samples < 20 * n * lags:
        raise DataError(
            "too few samples for skeleton recovery",
            samples=num_samples,
            required=20 * n * lags,
        )
    if not np.all(np.isfinite(features)):
        raise DataError("latents are not finite")
    if np.any(targets.std(axis=0) == 0):
        raise DataError("cannot recover parents of a constant component")
    if path_multiplier <= 1.0:
        raise ParameterError(
            f"path_multiplier must exceed 1, got {path_multiplier}", "path_multiplier"
        )
    if path is not None:
        path = [float(penalty) for penalty in sorted(path)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_samples)[:max_samples]
    features = (features - features.mean(axis=0)) / features.std(axis=0)
    targets = (targets - targets.mean(axis=0)) / targets.std(axis=0)
    num_val = max(int(len(order) * val_fraction), 1)
    val, fit = order[:num_val], order[num_val:]

    tasks = [
        (
            features[fit],
            targets[fit, i],
            features[val],
            targets[val, i],
            path,
            path_multiplier,
            max_path,
            hidden,
            hierarchy,
            lr,
            steps,
            seed + i,
        )
        for i in range(n)
    ]
    jobs = _pool_size(jobs)
    logger.info("fitting %d sparsity paths with %d job(s)", n, jobs)
    if jobs == 1:
        results = [_fit_target_path(task) for task in tasks]
    else:
        pool = Pool(min(jobs, n), initializer=torch.set_num_threads, initargs=(1,))
        try:
            results = pool.map(_fit_target_path, tasks)
        finally:
            pool.close()

    importance = np.stack([result[0] for result in results])  # [i, (tau, j)]
    paths = _padded([result[1] for result in results])
    val_errors = _padded([result[2] for result in results])
    logger.debug("path lengths %s", [len(result[1]) for result in results])
    scores = importance.reshape(n, lags, n).transpose(0, 2, 1)
    if threshold is None:
        baselines = targets[val].var(axis=0)
        thresholds = np.array(
            [
                _knee_threshold(paths[i], val_errors[i], baselines[i], KNEE_TOLERANCE)
                for i in range(n)
            ]
        )
    else:
        thresholds = np.full(n, float(threshold))
    est = scores > thresholds[:, None, None]
    return SkeletonReport(est, scores, thresholds, val_errors, paths)


def compare_skeleton(est, truth, assignment=None):
    """F1 of the recovered edges against the true adjacency, after relabeling
    the estimated components with the MCC assignment.

    # Arguments:
        est (SkeletonReport | np.ndarray): The estimate, indexed by estimated
            components.
        truth (np.ndarray): Boolean true adjacency `[n, n, L]`.
        assignment (MCCReport | np.ndarray): `assignment[k]` is the estimated
            component matched to true component `k`.

    # Raises:
        DataError: if the assignment is missing or the shapes differ.
    """
    if assignment is None:
        raise DataError(
            "compare_skeleton needs the assignment of an MCCReport to align "
            "estimated and true components"
        )
    if isinstance(assignment, MCCReport):
        assignment = assignment.assignment
    est = est.est_adjacency if isinstance(est, SkeletonReport) else est
    est, truth = np.asarray(est, dtype=bool), np.asarray(truth, dtype=bool)
    if est.shape != truth.shape:
        raise DataError(f"shape mismatch: {est.shape} vs {truth.shape}")
    assignment = np.asarray(assignment, dtype=np.int64)
    aligned = est[np.ix_(assignment, assignment)]
    true_positives = np.sum(aligned & truth)
    predicted, actual = np.sum(aligned), np.sum(truth)
    if predicted == 0 and actual == 0:
        return 1.0
    if true_positives == 0:
        return 0.0
    precision = true_positives / predicted
    recall = true_positives / actual
    return float(2.0 * precision * recall / (precision + recall))


def plot_latent_scatter(z_true, z_est, report, path, max_points=2000, seed=0):
    """Scatter every true component against its matched estimate and save the
    figure to `path`."""
    a, b = _pooled(z_true), _pooled(z_est)
    rng = np.random.default_rng(seed)
    keep = rng.permutation(a.shape[0])[:max_points]
    n = a.shape[1]
    cols = min(n, 4)
    rows = -(-n // cols)
    fig = Figure(figsize=(3 * cols, 3 * rows))
    for k in range(n):
        ax = fig.add_subplot(rows, cols, k + 1)
        match = report.assignment[k]
        ax.scatter(a[keep, k], b[keep, match], s=2, alpha=0.5)
        ax.set_xlabel(f"true z{k}")
        ax.set_ylabel(f"estimated z{match}")
        ax.set_title(f"|corr| = {report.corr[k, match]:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    return path
