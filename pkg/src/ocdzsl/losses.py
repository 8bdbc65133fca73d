"""Objective terms and online batch triplet mining.

All losses are batch means, so the lambda weights behave the same at any
batch size, and every loss returns a (possibly traced) scalar Tensor.
The triplet embedding is the regressor's attribute-space output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ParameterError, StateError
from .models import Centers, Decoder, Regressor, decode, regress
from .numgrad import Rng, Tensor, as_tensor, exp, maximum0, take_rows


@dataclass
class Hyperparams:
    """Every scalar knob of the pipeline, with working defaults."""

    lambda_c: float = 0.1
    lambda_r: float = 0.1
    lambda_reg: float = 0.1
    batch_size: int = 256
    mu_hp: float = 0.0
    sigma_hp: float = 0.12
    sigma_prime_hp: float = 0.5
    alpha: float = 0.4  # triplet margin
    latent_dim: int = 100
    hidden_dim: int = 512
    ocd_samples_per_class: int = 500
    center_lr: float = 0.5
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if min(self.lambda_c, self.lambda_r, self.lambda_reg) < 0:
            raise ParameterError("lambda weights must be >= 0")
        if self.sigma_hp <= 0 or self.sigma_prime_hp <= 0:
            raise ParameterError("sigma_hp and sigma_prime_hp must be > 0")
        if self.alpha <= 0:
            raise ParameterError("triplet margin alpha must be > 0")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2")
        if self.latent_dim < 1 or self.hidden_dim < 1 or self.ocd_samples_per_class < 1:
            raise ParameterError("dimensions and sample counts must be >= 1")
        if not 0.0 < self.center_lr <= 1.0:
            raise ParameterError("center_lr must be in (0, 1]")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")


class TripletIndex(NamedTuple):
    """In-batch (anchor, positive, negative) row indices."""

    anchor: int
    positive: int
    negative: int


def _mse(a: Tensor, b) -> Tensor:
    diff = a - as_tensor(b)
    return (diff * diff).mean()


def kl_divergence(mu, logvar) -> Tensor:
    """Batch-mean KL(N(mu, diag exp(logvar)) || N(0, I)).

    Per row: 1/2 * sum_j (mu^2 + sigma^2 - 1 - log sigma^2).
    """
    mu = as_tensor(mu)
    logvar = as_tensor(logvar)
    per_row = (mu * mu + exp(logvar) - 1.0 - logvar).sum(axis=1)
    return per_row.mean() * 0.5


def reconstruction_loss(x, x_hat) -> Tensor:
    """Batch-mean of 1/2 ||x - x_hat||^2 per row.

    This is the negative log-likelihood of a unit-variance Gaussian
    decoder (up to its constant), summed over feature dims like the KL
    term sums over latent dims, so the two ELBO halves stay on the same
    scale at any width.
    """
    diff = as_tensor(x_hat) - as_tensor(x)
    return (diff * diff).sum(axis=1).mean() * 0.5


def cvae_loss(x, x_hat, mu, logvar) -> Tensor:
    """Unit-variance Gaussian reconstruction plus the KL term."""
    return reconstruction_loss(x, x_hat) + kl_divergence(mu, logvar)


def triplet_loss(fa, fp, fn, alpha: float) -> Tensor:
    """max(0, ||fa-fp||^2 - ||fa-fn||^2 + alpha) for one triplet."""
    fa, fp, fn = as_tensor(fa), as_tensor(fp), as_tensor(fn)
    d_ap = ((fa - fp) ** 2).sum()
    d_an = ((fa - fn) ** 2).sum()
    return maximum0(d_ap - d_an + alpha)


def _pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", points, points)
    d = sq[:, None] - 2.0 * points @ points.T + sq[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _mine_triplet_arrays(emb: np.ndarray, labels: np.ndarray, mode: str) -> np.ndarray:
    """(T, 3) int array of mined (anchor, positive, negative) indices."""
    classes = np.unique(labels)
    if classes.size < 2:
        return np.empty((0, 3), dtype=np.int64)

    hardest: np.ndarray | None = None
    if mode == "hardest_negative":
        dists = _pairwise_sq_dists(emb)
        hardest = np.full(labels.size, -1, dtype=np.int64)
        for c in classes:
            members = np.flatnonzero(labels == c)
            negatives = np.flatnonzero(labels != c)
            # ties on distance resolve to the lowest negative index (argmin)
            hardest[members] = negatives[np.argmin(dists[np.ix_(members, negatives)], axis=1)]

    chunks: list[np.ndarray] = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            continue
        ai, pi = np.triu_indices(members.size, k=1)
        anchors, positives = members[ai], members[pi]
        if mode == "hardest_negative":
            chunks.append(np.column_stack([anchors, positives, hardest[anchors]]))
        else:
            negatives = np.flatnonzero(labels != c)
            n_pairs = anchors.size
            chunks.append(
                np.column_stack(
                    [
                        np.repeat(anchors, negatives.size),
                        np.repeat(positives, negatives.size),
                        np.tile(negatives, n_pairs),
                    ]
                )
            )
    if not chunks:
        return np.empty((0, 3), dtype=np.int64)
    return np.concatenate(chunks).astype(np.int64)


def mine_batch_triplets(embeddings, labels, mode: str = "hardest_negative") -> list[TripletIndex]:
    """Mine triplets inside one batch from the current embeddings.

    ``all_valid``: every same-class (anchor, positive) pair with
    anchor < positive, once per different-class negative.
    ``hardest_negative``: for each such pair, only the negative closest
    to the anchor in squared distance (first index on ties), giving
    sum_c C(n_c, 2) triplets.

    Batches without any valid triplet yield an empty list.
    """
    if mode not in ("all_valid", "hardest_negative"):
        raise ParameterError(f"unknown mining mode {mode!r}")
    emb = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    idx = _mine_triplet_arrays(emb, labels, mode)
    return [TripletIndex(int(a), int(p), int(n)) for a, p, n in idx]


def obtl_loss(embeddings, labels, alpha: float, mode: str = "hardest_negative") -> Tensor:
    """Mean triplet loss over the triplets mined from this batch; 0 if none."""
    if mode not in ("all_valid", "hardest_negative"):
        raise ParameterError(f"unknown mining mode {mode!r}")
    emb = as_tensor(embeddings)
    idx = _mine_triplet_arrays(emb.data, np.asarray(labels), mode)
    if idx.shape[0] == 0:
        return Tensor(0.0)
    fa = take_rows(emb, idx[:, 0])
    fp = take_rows(emb, idx[:, 1])
    fn = take_rows(emb, idx[:, 2])
    d_ap = ((fa - fp) ** 2).sum(axis=1)
    d_an = ((fa - fn) ** 2).sum(axis=1)
    return maximum0(d_ap - d_an + alpha).mean()


def center_loss(embeddings, labels, centers: Centers) -> Tensor:
    """Half the batch-mean squared distance to each row's class center."""
    emb = as_tensor(embeddings)
    labels = np.asarray(labels)
    missing = np.unique(labels[~centers.initialized[labels]])
    if missing.size:
        raise StateError(f"no learned center yet for classes {missing.tolist()}")
    targets = centers.values[labels]
    return ((emb - targets) ** 2).sum(axis=1).mean() * 0.5


def update_centers(centers: Centers, embeddings, labels, gamma_ct: float) -> Centers:
    """Move each present class's center toward its batch mean by gamma_ct.

    Classes absent from the batch keep their centers; classes never seen
    before are initialized straight to the batch mean.
    """
    if not 0.0 < gamma_ct <= 1.0:
        raise ParameterError(f"gamma_ct must be in (0, 1], got {gamma_ct}")
    emb = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    for c in np.unique(labels):
        mean = emb[labels == c].mean(axis=0)
        if centers.initialized[c]:
            centers.values[c] -= gamma_ct * (centers.values[c] - mean)
        else:
            centers.values[c] = mean
            centers.initialized[c] = True
    return centers


def attr_regression_loss(a_hat, a_true) -> Tensor:
    """Mean squared error between predicted and true attributes."""
    return _mse(as_tensor(a_hat), a_true)


def lc_loss(regressor: Regressor, x_hat_generated, a_cond) -> Tensor:
    """MSE between the regressor's read-back of generated samples and
    their conditioning attributes.

    Passing a traced ``x_hat_generated`` lets gradients reach the
    generator as well as the regressor; pass a plain array to freeze the
    generator side.
    """
    return _mse(regress(regressor, x_hat_generated), a_cond)


def lreg_loss(decoder: Decoder, x_real, a_of_x, rng: Rng) -> Tensor:
    """Anchor prior-sampled decodings to real same-class samples.

    Draws one z ~ N(0, I) per row and penalizes the squared error between
    decode(z, a) and the real sample carrying attribute a, pushing the
    decoder to stay class-specific for arbitrary latents.
    """
    x_real = np.asarray(x_real.data if isinstance(x_real, Tensor) else x_real, dtype=np.float64)
    a = np.asarray(a_of_x.data if isinstance(a_of_x, Tensor) else a_of_x, dtype=np.float64)
    z = rng.standard_normal((x_real.shape[0], decoder.latent_dim))
    return _mse(decode(decoder, z, a), x_real)


def phase3_objective(h: Hyperparams, *, lc, lreg, obtl, cl) -> Tensor:
    """lambda_c * lc + lambda_reg * lreg + obtl + cl."""
    return as_tensor(lc) * h.lambda_c + as_tensor(lreg) * h.lambda_reg + as_tensor(obtl) + as_tensor(cl)
