"""Evaluation protocols, metrics, ablation grid, and parameter sweeps.

Accuracies are per-class percentages in [0, 100], averaged unweighted
over classes that have at least one test sample; classes without test
samples are excluded and reported in ``warnings``. The GZSL summary is
the pair A (unseen test vs the joint candidate set) and B (held-out seen
test vs the joint candidate set) with their harmonic mean H.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, GzslSplit
from .errors import DataError, ParameterError, ProtocolError
from .models import classify_batch, predict_attributes
from .train import TrainConfig, TrainedModel, run_pipeline

ABLATION_SETTINGS: list[tuple[str, bool, bool, bool]] = [
    # (name, use_ocd, use_obtl, use_cl)
    ("OBTL", False, True, False),
    ("CL", False, False, True),
    ("OCD+OBTL", True, True, False),
    ("OCD+CL", True, False, True),
    ("OCD+OBTL+CL", True, True, True),
]

SWEEP_PARAMS = ("ocd_samples_per_class", "sigma_prime_hp")


@dataclass
class Metrics:
    """Per-class accuracies and their unweighted mean, as percentages."""

    per_class_acc: dict[int, float]
    mean_per_class_acc: float
    protocol: str
    warnings: list[int] = field(default_factory=list)  # classes with no test samples


@dataclass
class GzslMetrics:
    A: float
    B: float
    H: float
    per_class_unseen: dict[int, float] = field(default_factory=dict)
    per_class_seen: dict[int, float] = field(default_factory=dict)


def per_class_accuracy(predictions, labels, class_set, protocol: str = "zsl") -> Metrics:
    """Accuracy per class, then the unweighted mean across classes."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DataError(f"predictions shape {predictions.shape} != labels shape {labels.shape}")
    classes = sorted(int(c) for c in class_set)
    if not classes:
        raise ParameterError("class_set is empty")
    per_class: dict[int, float] = {}
    warnings: list[int] = []
    for c in classes:
        mask = labels == c
        if not mask.any():
            warnings.append(c)
            continue
        per_class[c] = 100.0 * float(np.mean(predictions[mask] == c))
    if not per_class:
        raise DataError("no test samples for any class in class_set")
    mean = float(np.mean(list(per_class.values())))
    return Metrics(per_class_acc=per_class, mean_per_class_acc=mean,
                   protocol=protocol, warnings=warnings)


def harmonic_mean(a: float, b: float) -> float:
    """2ab / (a + b); 0 when both sides are 0."""
    if a < 0 or b < 0:
        raise ParameterError("harmonic_mean needs nonnegative inputs")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def _test_rows(dataset: Dataset, rows: np.ndarray) -> np.ndarray:
    """Restrict to an externally fixed test index set when one is present."""
    if dataset.test_idx is None:
        return rows
    return np.intersect1d(rows, dataset.test_idx)


def eval_zsl(model: TrainedModel, dataset: Dataset) -> Metrics:
    """Classify unseen-class test samples against unseen candidates only."""
    rows = _test_rows(dataset, dataset.unseen_rows())
    if rows.size == 0:
        raise DataError("no unseen-class test samples to evaluate")
    a_hat = predict_attributes(model.regressor, dataset.features[rows])
    preds = classify_batch(a_hat, dataset.attributes, dataset.unseen_classes)
    return per_class_accuracy(preds, dataset.labels[rows], dataset.unseen_classes, "zsl")


def eval_gzsl(model: TrainedModel, dataset: Dataset, split: GzslSplit) -> GzslMetrics:
    """A: unseen test vs S+U. B: held-out seen test vs S+U. H = 2AB/(A+B)."""
    if split.test_unseen_idx.size == 0 or split.test_seen_idx.size == 0:
        raise ProtocolError("gzsl needs non-empty seen and unseen test partitions")
    candidates = np.concatenate([dataset.seen_classes, dataset.unseen_classes])

    rows_u = split.test_unseen_idx
    preds_u = classify_batch(predict_attributes(model.regressor, dataset.features[rows_u]),
                             dataset.attributes, candidates)
    unseen = per_class_accuracy(preds_u, dataset.labels[rows_u], dataset.unseen_classes, "gzsl_A")

    rows_s = split.test_seen_idx
    preds_s = classify_batch(predict_attributes(model.regressor, dataset.features[rows_s]),
                             dataset.attributes, candidates)
    seen = per_class_accuracy(preds_s, dataset.labels[rows_s], dataset.seen_classes, "gzsl_B")

    a, b = unseen.mean_per_class_acc, seen.mean_per_class_acc
    return GzslMetrics(A=a, B=b, H=harmonic_mean(a, b),
                       per_class_unseen=unseen.per_class_acc,
                       per_class_seen=seen.per_class_acc)


def split_for_config(dataset: Dataset, config: TrainConfig) -> GzslSplit:
    """The split a gzsl-protocol run trained on and must be scored against."""
    from .dataset import split_gzsl

    return split_gzsl(dataset, config.split_ratio, config.seed)


def _headline_accuracy(model: TrainedModel, dataset: Dataset, config: TrainConfig) -> float:
    if config.protocol == "gzsl":
        return eval_gzsl(model, dataset, split_for_config(dataset, config)).H
    return eval_zsl(model, dataset).mean_per_class_acc


def run_ablation(dataset: Dataset, base_config: TrainConfig) -> list[tuple[str, float]]:
    """Train the five loss-combination settings with a shared seed.

    Returns (setting, accuracy) rows; accuracy is the protocol headline
    number (mean per-class accuracy for zsl, H for gzsl).
    """
    rows: list[tuple[str, float]] = []
    for name, use_ocd, use_obtl, use_cl in ABLATION_SETTINGS:
        config = copy.deepcopy(base_config)
        config.use_ocd = use_ocd
        config.use_obtl = use_obtl
        config.use_cl = use_cl
        model = run_pipeline(dataset, config)
        rows.append((name, _headline_accuracy(model, dataset, config)))
    return rows


def run_sweep(dataset: Dataset, config: TrainConfig, param: str, values) -> list[tuple[float, float]]:
    """One pipeline + eval per value at a fixed seed; returns (value, accuracy).

    ``sigma_prime_hp`` values may probe below sigma_hp here; they only need
    to be positive. ``ocd_samples_per_class`` values must be integers >= 1.
    """
    if param not in SWEEP_PARAMS:
        raise ParameterError(f"sweep param must be one of {SWEEP_PARAMS}, got {param!r}")
    values = list(values)
    if not values:
        raise ParameterError("sweep needs at least one value")
    for v in values:
        if param == "ocd_samples_per_class" and (int(v) != v or v < 1):
            raise ParameterError(f"ocd_samples_per_class must be an integer >= 1, got {v}")
        if param == "sigma_prime_hp" and v <= 0:
            raise ParameterError(f"sigma_prime_hp must be > 0, got {v}")

    rows: list[tuple[float, float]] = []
    for v in values:
        cfg = copy.deepcopy(config)
        if param == "ocd_samples_per_class":
            cfg.hp.ocd_samples_per_class = int(v)
        else:
            cfg.hp.sigma_prime_hp = float(v)
        model = run_pipeline(dataset, cfg)
        rows.append((float(v), _headline_accuracy(model, dataset, cfg)))
    return rows


def metrics_to_json(metrics, seed: int) -> str:
    """One JSON object per protocol run, on a single line."""
    if isinstance(metrics, GzslMetrics):
        payload = {
            "protocol": "gzsl",
            "seed": seed,
            "A": metrics.A,
            "B": metrics.B,
            "H": metrics.H,
            "per_class": {
                "unseen": {str(k): v for k, v in sorted(metrics.per_class_unseen.items())},
                "seen": {str(k): v for k, v in sorted(metrics.per_class_seen.items())},
            },
        }
    else:
        payload = {
            "protocol": metrics.protocol,
            "seed": seed,
            "mean_per_class_acc": metrics.mean_per_class_acc,
            "per_class": {str(k): v for k, v in sorted(metrics.per_class_acc.items())},
            "excluded_classes": metrics.warnings,
        }
    return json.dumps(payload, sort_keys=True)


def write_metrics_csv(metrics, seed: int, path) -> None:
    """Long-form CSV: protocol, seed, metric, value."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["protocol", "seed", "metric", "value"])
        if isinstance(metrics, GzslMetrics):
            for key, value in (("A", metrics.A), ("B", metrics.B), ("H", metrics.H)):
                writer.writerow(["gzsl", seed, key, repr(value)])
            for c, v in sorted(metrics.per_class_unseen.items()):
                writer.writerow(["gzsl", seed, f"acc_unseen_class_{c}", repr(v)])
            for c, v in sorted(metrics.per_class_seen.items()):
                writer.writerow(["gzsl", seed, f"acc_seen_class_{c}", repr(v)])
        else:
            writer.writerow([metrics.protocol, seed, "mean_per_class_acc",
                             repr(metrics.mean_per_class_acc)])
            for c, v in sorted(metrics.per_class_acc.items()):
                writer.writerow([metrics.protocol, seed, f"acc_class_{c}", repr(v)])
