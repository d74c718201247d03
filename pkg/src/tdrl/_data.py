import logging

import attr
import numpy as np

from ._errors import DataError
from ._mixing import apply_mixing, make_random_mixing
from ._sim import simulate

logger = logging.getLogger(__name__)


@attr.s(slots=True, frozen=True, eq=False)
class ObservedDataset:
    """Ground-truth latents, their domain labels and their mixed observations.

    # Arguments:
        spec (GeneratorSpec): The spec the dataset was generated from.
        mixing (MixingFunction): The mixing `g`, `x = g(z)`.
        x (np.ndarray): Observations `[S, T, n]`.
        z (np.ndarray): Latents `[S, T, n]` (standardized if `spec.standardize`).
        domains (np.ndarray): Integer domain label per sequence `[S]`.
        adjacency (np.ndarray): Ground-truth lagged graph `[n, n, L]`.
        transition_params ([dict]): Recorded transition parameters per domain.
        latent_offset, latent_scale (np.ndarray): Raw latents are
            `z * latent_scale + latent_offset`.
    """

    spec = attr.ib()
    mixing = attr.ib()
    x = attr.ib()
    z = attr.ib()
    domains = attr.ib()
    adjacency = attr.ib()
    transition_params = attr.ib(factory=list)
    latent_offset = attr.ib(default=None)
    latent_scale = attr.ib(default=None)

    @property
    def num_seqs(self):
        return self.x.shape[0]

    @property
    def num_domains(self):
        return self.spec.num_domains

    def raw_latents(self):
        """Latents on the scale the process was simulated at."""
        if self.latent_scale is None:
            return self.z
        return self.z * self.latent_scale + self.latent_offset

    def subset(self, indices):
        """Dataset restricted to the sequences at `indices`."""
        indices = np.asarray(indices, dtype=np.int64)
        return attr.evolve(
            self, x=self.x[indices], z=self.z[indices], domains=self.domains[indices]
        )


def generate_dataset(spec, mixing_depth=3):
    """Simulate `spec` and mix the latents with a random invertible MLP.

    The mixing is seeded from `spec.seed` (through a separate stream), so equal
    specs give identical datasets.
    """
    trajectories = simulate(spec)
    z = np.concatenate([traj.z for traj in trajectories], axis=0)
    domains = np.concatenate(
        [np.full(traj.z.shape[0], traj.domain, dtype=np.int64) for traj in trajectories]
    )
    offset = scale = None
    if spec.standardize:
        offset = z.mean(axis=(0, 1))
        scale = z.std(axis=(0, 1))
        if np.any(scale == 0):
            raise DataError("cannot standardize a constant latent component")
        z = (z - offset) / scale
    mixing = make_random_mixing(spec.n, mixing_depth, seed=[spec.seed, 1])
    x = apply_mixing(mixing, z)
    logger.info("generated dataset with %d sequences of length %d", *z.shape[:2])
    return ObservedDataset(
        spec=spec,
        mixing=mixing,
        x=x,
        z=z,
        domains=domains,
        adjacency=trajectories[0].adjacency,
        transition_params=[traj.transition_params for traj in trajectories],
        latent_offset=offset,
        latent_scale=scale,
    )


def split_indices(num_seqs, val_fraction, seed):
    """Seeded split of sequence indices into `(train, validation)`.

    At least one sequence is held out when `val_fraction > 0`, and at least one
    sequence is kept for training.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise DataError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    num_val = int(np.ceil(val_fraction * num_seqs))
    num_val = min(num_val, num_seqs - 1)
    order = np.random.default_rng(seed).permutation(num_seqs)
    return np.sort(order[num_val:]), np.sort(order[:num_val])
