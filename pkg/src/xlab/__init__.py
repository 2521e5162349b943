"""Extraction-risk laboratory.

Trains natural and adversarially hardened victim classifiers, exposes them
through budgeted prediction oracles (in-process or over HTTP), extracts them
into surrogate models via soft-label queries, and reports accuracy,
agreement, adversarial-accuracy grids, and extraction gain ratios.
"""

__version__ = "0.1.0"

from .attacks import AdvTrainConfig, AttackConfig, adversarial_train, craft_adversarial_set, fgsm, pgd
from .data import LabeledDataset, SynthConfig, batches, load_idx, synth_generate
from .extraction import (ExtractionConfig, LocalOracle, Oracle, TransferSet,
                         build_transferset, extract, train_surrogate)
from .metrics import accuracy, adv_accuracy_grid, agreement, extraction_gains
from .models import (Model, ModelSpec, build_model, load_checkpoint, model_family,
                     predict_label, predict_proba, save_checkpoint)
from .tensor import Graph, Tensor, gradient_check
from .training import TrainConfig, evaluate_accuracy, lr_at, train

__all__ = [
    "AdvTrainConfig", "AttackConfig", "adversarial_train", "craft_adversarial_set",
    "fgsm", "pgd", "LabeledDataset", "SynthConfig", "batches", "load_idx",
    "synth_generate", "ExtractionConfig", "LocalOracle", "Oracle", "TransferSet",
    "build_transferset", "extract", "train_surrogate", "accuracy",
    "adv_accuracy_grid", "agreement", "extraction_gains", "Model", "ModelSpec",
    "build_model", "load_checkpoint", "model_family", "predict_label",
    "predict_proba", "save_checkpoint", "Graph", "Tensor", "gradient_check",
    "TrainConfig", "evaluate_accuracy", "lr_at", "train",
]
