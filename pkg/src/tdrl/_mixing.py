import attr
import numpy as np

from ._errors import DataError, NumericalError

MAX_CONDITION_NUMBER = 1e4


def _leaky_relu(x, slope):
    return np.where(x >= 0, x, slope * x)


def _inverse_leaky_relu(y, slope):
    return np.where(y >= 0, y, y / slope)


def _well_conditioned(instance, attribute, weights):
    for i, weight in enumerate(weights):
        if weight.ndim != 2 or weight.shape[0] != weight.shape[1]:
            raise DataError(f"mixing layer {i} is not square", shape=weight.shape)
        if np.linalg.cond(weight) > MAX_CONDITION_NUMBER:
            raise NumericalError(f"mixing layer {i} is ill-conditioned")


def _positive_slope(instance, attribute, value):
    if not value > 0:
        raise NumericalError(f"LeakyReLU slope must be positive, got {value}")


@attr.s(slots=True, frozen=True, eq=False)
class MixingFunction:
    """Invertible LeakyReLU MLP `x = g(z)`.

    Every layer computes `h -> W h + b` followed by a LeakyReLU, except the last
    layer which is affine. Weights are square and well conditioned, and the
    slope is positive, so each layer (and hence `g`) is a bijection.

    # Arguments:
        weights ([np.ndarray]): `depth` square `[n, n]` matrices.
        biases ([np.ndarray]): `depth` bias vectors of length `n`.
        slope (float): LeakyReLU negative slope.
    """

    weights = attr.ib(
        converter=lambda ws: tuple(np.asarray(w, dtype=float) for w in ws),
        validator=_well_conditioned,
    )
    biases = attr.ib(converter=lambda bs: tuple(np.asarray(b, dtype=float) for b in bs))
    slope = attr.ib(default=0.2, converter=float, validator=_positive_slope)

    @property
    def n(self):
        return self.weights[0].shape[0]

    @property
    def depth(self):
        return len(self.weights)

    def to_dict(self):
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["weights"], data["biases"], data["slope"])


def make_random_mixing(n, depth=3, seed=None, slope=0.2):
    """Draw a random invertible mixing.

    Each weight is a random orthogonal matrix times a diagonal with entries
    uniform on `[0.5, 2]`, so its singular values lie in `[0.5, 2]`. Biases are
    uniform on `[-0.1, 0.1]`.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for _ in range(depth):
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        q = q * np.sign(np.diag(r))
        weights.append(q * rng.uniform(0.5, 2.0, size=n))
        biases.append(rng.uniform(-0.1, 0.1, size=n))
    return MixingFunction(weights, biases, slope)


def _check_columns(g, array):
    array = np.asarray(array, dtype=float)
    if array.ndim == 0 or array.shape[-1] != g.n:
        raise DataError(
            f"expected {g.n} columns, got array of shape {array.shape}"
        )
    return array


def apply_mixing(g, z):
    """Apply `g` row-wise to `z` of shape `[..., n]`."""
    h = _check_columns(g, z)
    last = g.depth - 1
    for i, (weight, bias) in enumerate(zip(g.weights, g.biases)):
        h = h @ weight.T + bias
        if i < last:
            h = _leaky_relu(h, g.slope)
    return h


def invert_mixing(g, x):
    """Exact inverse of `apply_mixing`: per layer, undo the LeakyReLU and solve
    the linear system.

    # Raises:
        NumericalError: if a layer solve fails.
    """
    h = _check_columns(g, x)
    shape = h.shape
    h = h.reshape(-1, g.n)
    last = g.depth - 1
    for i in reversed(range(g.depth)):
        if i < last:
            h = _inverse_leaky_relu(h, g.slope)
        try:
            h = np.linalg.solve(g.weights[i], (h - g.biases[i]).T).T
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular mixing layer {i}") from exc
    return h.reshape(shape)
