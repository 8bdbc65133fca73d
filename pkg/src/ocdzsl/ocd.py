"""Over-complete distribution synthesis: hard samples between classes.

Pipeline: decode prior-ish latents per class to approximate each class's
distribution, re-encode those samples to get per-row latent means, pair
every row with a different row via a fixed-point-free shuffle, move to the
elementwise midpoint of the two means, sample around the midpoint with a
wider std, and decode with the row's ORIGINAL class attributes. The
conditioning attributes pass through bit-exactly, so every synthesized row
keeps its anchor's label while sitting between two classes in latent
space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .models import Decoder, Encoder, decode, encode
from .numgrad import Rng, no_grad, sample_gaussian

# Rejection sampling for a derangement succeeds with prob >= 1/e per try;
# this cap exists only to turn an RNG bug into a loud failure.
_MAX_DERANGEMENT_TRIES = 10_000


@dataclass
class OCDParams:
    """Knobs of the hard-sample generator.

    sigma_prime_hp is the wider std used around the midpoint means and is
    expected to exceed sigma_hp; construction enforces the ordering unless
    ``require_sigma_order=False`` (used by exploratory sweeps that probe
    values below sigma_hp).
    """

    mu_hp: float = 0.0
    sigma_hp: float = 0.12
    sigma_prime_hp: float = 0.5
    samples_per_class: int = 500
    forbid_fixed_points: bool = True
    batch_rows: int = 256

    def validate(self, require_sigma_order: bool = True) -> None:
        if self.sigma_hp <= 0 or self.sigma_prime_hp <= 0:
            raise ParameterError("sigma_hp and sigma_prime_hp must be > 0")
        if require_sigma_order and self.sigma_prime_hp <= self.sigma_hp:
            raise ParameterError(
                f"sigma_prime_hp ({self.sigma_prime_hp}) must exceed sigma_hp ({self.sigma_hp})"
            )
        if self.samples_per_class < 1:
            raise ParameterError("samples_per_class must be >= 1")
        if self.batch_rows < 2:
            raise ParameterError("batch_rows must be >= 2")


@dataclass
class OCDBatch:
    """Synthesized hard samples with their retained attributes and labels."""

    x_oc: np.ndarray  # (M, d_x)
    attrs: np.ndarray  # (M, L), bit-exact copies of each label's attribute row
    labels: np.ndarray  # (M,) int64

    def __len__(self) -> int:
        return self.x_oc.shape[0]


def approximate_distribution(
    decoder: Decoder,
    class_attrs: np.ndarray,
    n_per_class: int,
    params: OCDParams,
    rng: Rng,
    class_ids=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per class: decode n draws of z ~ N(mu_hp, sigma_hp I).

    Returns the decoded rows (class blocks in class_attrs order) and their
    labels. class_ids maps attribute rows to real class ids; defaults to
    row numbers.
    """
    if n_per_class < 1:
        raise ParameterError("n_per_class must be >= 1")
    class_attrs = np.asarray(class_attrs, dtype=np.float64)
    n_classes = class_attrs.shape[0]
    ids = np.arange(n_classes, dtype=np.int64) if class_ids is None else np.asarray(class_ids, dtype=np.int64)
    if ids.shape != (n_classes,):
        raise ParameterError("class_ids must align with class_attrs rows")

    z = sample_gaussian(
        np.full((n_classes * n_per_class, decoder.latent_dim), params.mu_hp),
        params.sigma_hp,
        rng,
    )
    attrs = np.repeat(class_attrs, n_per_class, axis=0)
    labels = np.repeat(ids, n_per_class)
    with no_grad():
        x_hat = decode(decoder, z, attrs).data
    return x_hat, labels


def shuffle_means(mu: np.ndarray, rng: Rng, forbid_fixed_points: bool = True) -> np.ndarray:
    """Rows of mu under a uniformly random permutation.

    With forbid_fixed_points the permutation is rejection-sampled until it
    is a derangement, so every row gets a different partner.
    """
    mu = np.asarray(mu, dtype=np.float64)
    n = mu.shape[0]
    if n < 2 and forbid_fixed_points:
        raise ParameterError("need >= 2 rows for a fixed-point-free shuffle")
    perm = rng.permutation(n)
    if forbid_fixed_points:
        tries = 1
        while np.any(perm == np.arange(n)):
            if tries >= _MAX_DERANGEMENT_TRIES:
                raise ParameterError("could not sample a derangement")
            perm = rng.permutation(n)
            tries += 1
    return mu[perm]


def overcomplete_latents(mu: np.ndarray, params: OCDParams, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint means between each row and its shuffled partner, plus the
    latents sampled around them with the wider std."""
    mu = np.asarray(mu, dtype=np.float64)
    mu_partner = shuffle_means(mu, rng, params.forbid_fixed_points)
    mu_oc = 0.5 * (mu + mu_partner)
    z_oc = sample_gaussian(mu_oc, params.sigma_prime_hp, rng)
    return mu_oc, z_oc


def _chunk_bounds(total: int, chunk: int) -> list[tuple[int, int]]:
    bounds = [(lo, min(lo + chunk, total)) for lo in range(0, total, chunk)]
    # a trailing 1-row chunk cannot be deranged; fold it into its neighbour
    if len(bounds) >= 2 and bounds[-1][1] - bounds[-1][0] == 1:
        lo, _ = bounds[-2]
        bounds[-2:] = [(lo, total)]
    return bounds


def generate_ocd(
    encoder: Encoder,
    decoder: Decoder,
    class_attrs: np.ndarray,
    params: OCDParams,
    rng: Rng,
    class_ids=None,
    require_sigma_order: bool = True,
) -> OCDBatch:
    """Full hard-sample pipeline over the given class attribute rows.

    Rows are globally shuffled before chunking so each processed chunk
    mixes classes, then per chunk: encode, derange the latent means, take
    midpoints, sample with sigma_prime_hp, decode with the rows' original
    attributes.
    """
    params.validate(require_sigma_order=require_sigma_order)
    x_hat, labels = approximate_distribution(
        decoder, class_attrs, params.samples_per_class, params, rng, class_ids
    )
    attrs = np.repeat(np.asarray(class_attrs, dtype=np.float64), params.samples_per_class, axis=0)

    order = rng.permutation(x_hat.shape[0])
    x_hat, labels, attrs = x_hat[order], labels[order], attrs[order]

    x_oc = np.empty_like(x_hat)
    with no_grad():
        for lo, hi in _chunk_bounds(x_hat.shape[0], params.batch_rows):
            mu, _logvar = encode(encoder, x_hat[lo:hi])
            _mu_oc, z_oc = overcomplete_latents(mu.data, params, rng)
            x_oc[lo:hi] = decode(decoder, z_oc, attrs[lo:hi]).data
    return OCDBatch(x_oc=x_oc, attrs=attrs, labels=labels)
