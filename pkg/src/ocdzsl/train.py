"""Three-phase training schedule.

Phase 1 trains the CVAE (encoder+decoder) on seen-class data with
reconstruction + KL. Phase 2 trains the regressor on seen data with
online batch triplet loss, center loss, and a lambda_r-weighted attribute
regression term, updating class centers after every step. Phase 3
fine-tunes decoder and regressor jointly (encoder frozen): prior-sampled
decodings feed the lambda_c read-back and lambda_reg anchoring terms,
while the metric losses run on batches that are half real and half
hard samples when hard-sample synthesis is enabled.

Protocols: ``zsl`` trains on all seen rows and synthesizes hard samples
between unseen classes; ``gzsl`` trains on the per-class 80/20 train side,
synthesizes hard samples over all classes, and mixes decoder-generated
unseen-class rows into the phase-3 pool so the regressor sees S+U.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, split_gzsl
from .errors import DataError, ParameterError, StateError
from .losses import (
    Hyperparams,
    attr_regression_loss,
    center_loss,
    kl_divergence,
    lc_loss,
    lreg_loss,
    obtl_loss,
    phase3_objective,
    reconstruction_loss,
    update_centers,
)
from .models import (
    Centers,
    Decoder,
    Encoder,
    Regressor,
    decode,
    encode,
    load_store_blocks,
    read_model_file,
    regress,
    reparameterize,
    store_blocks,
    write_model_file,
)
from .numgrad import Rng, Tensor, backward, no_grad, optimizer_step

HISTORY_COLUMNS = ["recon", "kl", "obtl", "cl", "attr", "lc", "lreg"]


@dataclass
class TrainConfig:
    """Hyperparameters plus schedule, ablation flags, protocol, and seed."""

    hp: Hyperparams = field(default_factory=Hyperparams)
    epochs_phase1: int = 50
    epochs_phase2: int = 50
    epochs_phase3: int = 50
    use_ocd: bool = True
    use_obtl: bool = True
    use_cl: bool = True
    protocol: str = "zsl"
    seed: int = 0
    split_ratio: float = 0.8
    forbid_fixed_points: bool = True

    def validate(self) -> None:
        self.hp.validate()
        if self.protocol not in ("zsl", "gzsl"):
            raise ParameterError(f"protocol must be 'zsl' or 'gzsl', got {self.protocol!r}")
        if min(self.epochs_phase1, self.epochs_phase2, self.epochs_phase3) < 0:
            raise ParameterError("epoch counts must be >= 0")
        if not 0.0 < self.split_ratio < 1.0:
            raise ParameterError("split_ratio must be in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        hp = Hyperparams(**d.pop("hp"))
        return cls(hp=hp, **d)


@dataclass
class ModelBundle:
    encoder: Encoder | None
    decoder: Decoder | None
    regressor: Regressor | None
    centers: Centers | None


@dataclass
class HistoryRow:
    phase: int
    epoch: int
    total: float
    parts: dict[str, float]


@dataclass
class TrainedModel:
    encoder: Encoder
    decoder: Decoder
    regressor: Regressor
    centers: Centers
    config: TrainConfig
    history: list[HistoryRow]


def training_rows(dataset: Dataset, config: TrainConfig) -> np.ndarray:
    """Seen rows used for training: all of them for zsl, the 80% side for gzsl."""
    if config.protocol == "gzsl":
        return split_gzsl(dataset, config.split_ratio, config.seed).train_seen_idx
    return dataset.seen_rows()


def _batches(indices: np.ndarray, batch_size: int, rng: Rng):
    perm = rng.permutation(indices.size)
    shuffled = indices[perm]
    for lo in range(0, shuffled.size, batch_size):
        yield shuffled[lo : lo + batch_size]


class _EpochMean:
    """Sample-weighted running means of the per-batch loss parts."""

    def __init__(self):
        self.n = 0
        self.total = 0.0
        self.parts: dict[str, float] = {}

    def add(self, n: int, total: float, parts: dict[str, float]) -> None:
        self.n += n
        self.total += n * total
        for key, value in parts.items():
            self.parts[key] = self.parts.get(key, 0.0) + n * value

    def row(self, phase: int, epoch: int) -> HistoryRow:
        scale = 1.0 / max(self.n, 1)
        return HistoryRow(
            phase=phase,
            epoch=epoch,
            total=self.total * scale,
            parts={k: v * scale for k, v in self.parts.items()},
        )


def train_phase1(dataset: Dataset, config: TrainConfig, rng: Rng,
                 history: list[HistoryRow] | None = None) -> tuple[Encoder, Decoder]:
    """CVAE pretraining: reconstruction MSE + KL on seen-class batches."""
    config.validate()
    hp = config.hp
    rows = training_rows(dataset, config)
    if rows.size == 0:
        raise DataError("phase 1 needs at least one seen-class training sample")
    r_enc, r_dec, r_loop = rng.split(3)
    # posterior starts at the width the generation recipe assumes
    enc = Encoder(dataset.feature_dim, hp.hidden_dim, hp.latent_dim, r_enc,
                  logvar_bias=2.0 * math.log(hp.sigma_hp))
    dec = Decoder(hp.latent_dim, dataset.attr_dim, dataset.feature_dim, hp.hidden_dim, r_dec)

    for epoch in range(config.epochs_phase1):
        mean = _EpochMean()
        for batch in _batches(rows, hp.batch_size, r_loop):
            x = dataset.features[batch]
            a = dataset.attributes[dataset.labels[batch]]
            mu, logvar = encode(enc, x)
            z = reparameterize(mu, logvar, r_loop)
            x_hat = decode(dec, z, a)
            recon = reconstruction_loss(x, x_hat)
            kl = kl_divergence(mu, logvar)
            loss = recon + kl
            backward(loss)
            optimizer_step(enc.params, hp.learning_rate, hp.beta1, hp.beta2, hp.adam_eps)
            optimizer_step(dec.params, hp.learning_rate, hp.beta1, hp.beta2, hp.adam_eps)
            mean.add(batch.size, loss.item(), {"recon": recon.item(), "kl": kl.item()})
        if history is not None:
            history.append(mean.row(1, epoch))
    return enc, dec


def metric_losses(regressor: Regressor, centers: Centers, x: np.ndarray, labels: np.ndarray,
                  hp: Hyperparams, use_obtl: bool, use_cl: bool) -> tuple[Tensor, Tensor, Tensor]:
    """Embeddings plus the (possibly disabled) triplet and center terms."""
    emb = regress(regressor, x)
    centers.ensure_initialized(emb.data, labels)
    obtl_t = obtl_loss(emb, labels, hp.alpha) if use_obtl else Tensor(0.0)
    cl_t = center_loss(emb, labels, centers) if use_cl else Tensor(0.0)
    return emb, obtl_t, cl_t


def train_phase2(dataset: Dataset, regressor: Regressor, centers: Centers,
                 config: TrainConfig, rng: Rng,
                 history: list[HistoryRow] | None = None) -> tuple[Regressor, Centers]:
    """Metric training of the regressor; centers chase batch means."""
    config.validate()
    hp = config.hp
    rows = training_rows(dataset, config)
    if rows.size == 0:
        raise DataError("phase 2 needs at least one seen-class training sample")

    for epoch in range(config.epochs_phase2):
        mean = _EpochMean()
        for batch in _batches(rows, hp.batch_size, rng):
            x = dataset.features[batch]
            y = dataset.labels[batch]
            emb, obtl_t, cl_t = metric_losses(regressor, centers, x, y, hp, config.use_obtl, config.use_cl)
            attr_t = attr_regression_loss(emb, dataset.attributes[y])
            loss = obtl_t + cl_t + attr_t * hp.lambda_r
            if loss.requires_grad:
                backward(loss)
                optimizer_step(regressor.params, hp.learning_rate, hp.beta1, hp.beta2, hp.adam_eps)
            update_centers(centers, emb.data, y, hp.center_lr)
            mean.add(batch.size, loss.item(),
                     {"obtl": obtl_t.item(), "cl": cl_t.item(), "attr": attr_t.item()})
        if history is not None:
            history.append(mean.row(2, epoch))
    return regressor, centers


def _phase3_class_ids(dataset: Dataset, config: TrainConfig) -> np.ndarray:
    if config.protocol == "gzsl":
        return np.sort(np.concatenate([dataset.seen_classes, dataset.unseen_classes]))
    return np.sort(dataset.unseen_classes)


def _synth_unseen_pool(decoder: Decoder, dataset: Dataset, n_per_class: int,
                       rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Decoder-generated unseen-class rows from prior latents."""
    unseen = np.sort(dataset.unseen_classes)
    z = rng.standard_normal((unseen.size * n_per_class, decoder.latent_dim))
    attrs = np.repeat(dataset.attributes[unseen], n_per_class, axis=0)
    with no_grad():
        x = decode(decoder, z, attrs).data
    return x, np.repeat(unseen, n_per_class)


class _OcdCycler:
    """Deterministic endless sampler over a hard-sample pool."""

    def __init__(self, pool_size: int, rng: Rng):
        self._size = pool_size
        self._rng = rng
        self._perm = rng.permutation(pool_size)
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            if self._pos == self._size:
                self._perm = self._rng.permutation(self._size)
                self._pos = 0
            k = min(n - filled, self._size - self._pos)
            out[filled : filled + k] = self._perm[self._pos : self._pos + k]
            self._pos += k
            filled += k
        return out


def train_phase3(dataset: Dataset, models: ModelBundle, config: TrainConfig, rng: Rng,
                 history: list[HistoryRow] | None = None) -> TrainedModel:
    """Joint decoder+regressor fine-tuning on real and synthesized batches."""
    from .ocd import OCDParams, generate_ocd  # local import keeps module load acyclic

    config.validate()
    hp = config.hp
    enc, dec, reg, centers = models.encoder, models.decoder, models.regressor, models.centers
    if reg is None or centers is None:
        raise StateError("phase 3 needs the regressor and centers from phase 2")
    if config.epochs_phase3 > 0 and config.use_ocd and (enc is None or dec is None):
        raise StateError("hard-sample generation needs the trained CVAE from phase 1")
    if dec is None or enc is None:
        raise StateError("phase 3 needs the encoder and decoder from phase 1")

    rows = training_rows(dataset, config)
    if config.epochs_phase3 > 0 and rows.size == 0:
        raise DataError("phase 3 needs seen-class training samples")
    class_ids = _phase3_class_ids(dataset, config)
    if config.epochs_phase3 > 0 and class_ids.size == 0:
        raise DataError("phase 3 has no classes to synthesize for")
    ocd_params = OCDParams(
        mu_hp=hp.mu_hp,
        sigma_hp=hp.sigma_hp,
        sigma_prime_hp=hp.sigma_prime_hp,
        samples_per_class=hp.ocd_samples_per_class,
        forbid_fixed_points=config.forbid_fixed_points,
        batch_rows=hp.batch_size,
    )

    r_loop, r_ocd, r_synth, r_gen = rng.split(4)
    real_x = dataset.features[rows]
    real_y = dataset.labels[rows]

    synth_per_class = 0
    if config.protocol == "gzsl" and dataset.unseen_classes.size:
        counts = [np.sum(real_y == c) for c in dataset.seen_classes]
        synth_per_class = max(1, int(round(float(np.mean(counts)))))

    train_decoder = hp.lambda_c > 0 or hp.lambda_reg > 0

    for epoch in range(config.epochs_phase3):
        pool_x, pool_y = real_x, real_y
        pool_real = np.ones(real_y.size, dtype=bool)
        if synth_per_class:
            sx, sy = _synth_unseen_pool(dec, dataset, synth_per_class, r_synth)
            pool_x = np.vstack([real_x, sx])
            pool_y = np.concatenate([real_y, sy])
            pool_real = np.concatenate([pool_real, np.zeros(sy.size, dtype=bool)])

        ocd_batch = None
        cycler = None
        if config.use_ocd:
            ocd_batch = generate_ocd(enc, dec, dataset.attributes[class_ids], ocd_params, r_ocd,
                                     class_ids=class_ids)
            cycler = _OcdCycler(len(ocd_batch), r_ocd)

        chunk = hp.batch_size // 2 if config.use_ocd else hp.batch_size
        mean = _EpochMean()
        for batch in _batches(np.arange(pool_y.size), chunk, r_loop):
            xb, yb, realb = pool_x[batch], pool_y[batch], pool_real[batch]
            if ocd_batch is not None:
                take = cycler.take(batch.size)
                metric_x = np.vstack([xb, ocd_batch.x_oc[take]])
                metric_y = np.concatenate([yb, ocd_batch.labels[take]])
            else:
                metric_x, metric_y = xb, yb

            emb, obtl_t, cl_t = metric_losses(reg, centers, metric_x, metric_y, hp,
                                              config.use_obtl, config.use_cl)

            if hp.lambda_c > 0:
                gen_ids = class_ids[r_gen.integers(0, class_ids.size, size=metric_y.size)]
                a_gen = dataset.attributes[gen_ids]
                # same latent recipe as the plain class-approximation draws
                z_gen = hp.mu_hp + hp.sigma_hp * r_gen.standard_normal((gen_ids.size, dec.latent_dim))
                lc_t = lc_loss(reg, decode(dec, z_gen, a_gen), a_gen)
            else:
                lc_t = Tensor(0.0)

            if hp.lambda_reg > 0 and realb.any():
                xr = xb[realb]
                lreg_t = lreg_loss(dec, xr, dataset.attributes[yb[realb]], r_gen)
            else:
                lreg_t = Tensor(0.0)

            loss = phase3_objective(hp, lc=lc_t, lreg=lreg_t, obtl=obtl_t, cl=cl_t)
            if loss.requires_grad:
                backward(loss)
                if train_decoder:
                    optimizer_step(dec.params, hp.learning_rate, hp.beta1, hp.beta2, hp.adam_eps)
                optimizer_step(reg.params, hp.learning_rate, hp.beta1, hp.beta2, hp.adam_eps)
            update_centers(centers, emb.data, metric_y, hp.center_lr)
            mean.add(metric_y.size, loss.item(),
                     {"lc": lc_t.item(), "lreg": lreg_t.item(),
                      "obtl": obtl_t.item(), "cl": cl_t.item()})
        if history is not None:
            history.append(mean.row(3, epoch))

    return TrainedModel(encoder=enc, decoder=dec, regressor=reg, centers=centers,
                        config=config, history=history if history is not None else [])


def run_pipeline(dataset: Dataset, config: TrainConfig) -> TrainedModel:
    """Phases 1 -> 2 -> 3 with split RNG streams; fully seed-deterministic."""
    config.validate()
    dataset.validate()
    r_p1, r_reg, r_p2, r_p3 = Rng(config.seed).split(4)
    history: list[HistoryRow] = []

    enc, dec = train_phase1(dataset, config, r_p1, history)
    reg = Regressor(dataset.feature_dim, config.hp.hidden_dim, dataset.attr_dim, r_reg)
    centers = Centers(dataset.num_classes, dataset.attr_dim, gamma=config.hp.center_lr)
    reg, centers = train_phase2(dataset, reg, centers, config, r_p2, history)
    return train_phase3(dataset, ModelBundle(enc, dec, reg, centers), config, r_p3, history)


def save_checkpoint(model: TrainedModel, path) -> None:
    """Named parameter blocks + centers + JSON config echo (float32 payload)."""
    blocks: dict[str, np.ndarray] = {}
    blocks.update(store_blocks(model.encoder.params))
    blocks.update(store_blocks(model.decoder.params))
    blocks.update(store_blocks(model.regressor.params))
    blocks["centers"] = model.centers.values
    blocks["centers_mask"] = model.centers.initialized.astype(np.float64)[None, :]
    echo = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":"))
    write_model_file(path, blocks, echo)


def load_checkpoint(path) -> TrainedModel:
    """Rebuild a TrainedModel (empty history) from a checkpoint file."""
    blocks, echo = read_model_file(path)
    config = TrainConfig.from_dict(json.loads(echo))
    d_x, hidden = blocks["enc.h.W"].shape
    latent = blocks["enc.mu.W"].shape[1]
    attr_dim = blocks["reg.out.W"].shape[1]
    num_classes = blocks["centers"].shape[0]

    seed = Rng(0)
    enc = Encoder(d_x, hidden, latent, seed)
    dec = Decoder(latent, attr_dim, d_x, hidden, seed)
    reg = Regressor(d_x, hidden, attr_dim, seed)
    load_store_blocks(enc.params, blocks)
    load_store_blocks(dec.params, blocks)
    load_store_blocks(reg.params, blocks)
    centers = Centers(num_classes, attr_dim, gamma=config.hp.center_lr)
    centers.values = blocks["centers"].copy()
    centers.initialized = blocks["centers_mask"][0] > 0.5
    return TrainedModel(encoder=enc, decoder=dec, regressor=reg, centers=centers,
                        config=config, history=[])


def write_history_csv(history: list[HistoryRow], path) -> None:
    """CSV rows: phase, epoch, loss_total, then per-part columns (blank if n/a)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "epoch", "loss_total"] + [f"loss_{c}" for c in HISTORY_COLUMNS])
        for row in history:
            cells = [row.phase, row.epoch, repr(row.total)]
            for col in HISTORY_COLUMNS:
                cells.append(repr(row.parts[col]) if col in row.parts else "")
            writer.writerow(cells)
