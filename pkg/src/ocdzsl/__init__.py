"""Zero-shot learning with CVAE-synthesized over-complete distributions.

A CVAE learns seen-class feature distributions; hard samples are then
synthesized between classes by shuffling latent means and sampling around
their midpoints; a regressor trained with online batch triplet and center
losses maps features to attribute space, where nearest-attribute
classification realizes the ZSL and GZSL protocols.
"""

from .dataset import Dataset, GzslSplit, SynthConfig, load_dataset, make_synthetic, save_dataset, split_gzsl
from .evaluate import eval_gzsl, eval_zsl, harmonic_mean, per_class_accuracy, run_ablation, run_sweep
from .losses import Hyperparams
from .numgrad import Rng
from .ocd import OCDBatch, OCDParams, generate_ocd
from .train import TrainConfig, TrainedModel, load_checkpoint, run_pipeline, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GzslSplit",
    "SynthConfig",
    "load_dataset",
    "make_synthetic",
    "save_dataset",
    "split_gzsl",
    "eval_gzsl",
    "eval_zsl",
    "harmonic_mean",
    "per_class_accuracy",
    "run_ablation",
    "run_sweep",
    "Hyperparams",
    "Rng",
    "OCDBatch",
    "OCDParams",
    "generate_ocd",
    "TrainConfig",
    "TrainedModel",
    "load_checkpoint",
    "run_pipeline",
    "save_checkpoint",
    "__version__",
]
