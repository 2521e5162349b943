"""Black-box model extraction through a prediction oracle.

The attacker sees nothing but the oracle's query interface: it samples
inputs from its own pool, collects the returned probability vectors as soft
labels, and trains a surrogate of a different architecture on them. Victim
parameters, architecture, and training data never cross this boundary;
accuracy and agreement against the victim are computed by the experiment
harness acting as auditor, not by the attacker.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .data import LabeledDataset
from .errors import BudgetExhaustedError, ExperimentError
from .metrics import agreement as _agreement
from .models import (Model, ModelSpec, _read_container, _write_container,
                     build_model, predict_proba)
from .reports import ExtractionReport, victim_type_for
from .training import TrainConfig, evaluate_accuracy, soft_config, train


@runtime_checkable
class Oracle(Protocol):
    """Query interface: a batch of inputs in, one probability row per input out."""

    def query(self, inputs: np.ndarray) -> np.ndarray: ...


class LocalOracle:
    """In-process oracle wrapping a model, with optional budget enforcement.

    The budget counts samples, not requests. Queries that would overspend are
    rejected whole and consume nothing; accounting is atomic under
    concurrent use.
    """

    def __init__(self, model: Model, budget: int | None = None, name: str = "local"):
        self._model = model
        self._budget = budget
        self._used = 0
        self._lock = threading.Lock()
        self.name = name

    @property
    def num_classes(self) -> int:
        return self._model.spec.num_classes

    @property
    def queries_used(self) -> int:
        return self._used

    @property
    def budget_remaining(self) -> int | None:
        if self._budget is None:
            return None
        return self._budget - self._used

    def query(self, inputs: np.ndarray) -> np.ndarray:
        n = len(inputs)
        with self._lock:
            if self._budget is not None and self._used + n > self._budget:
                raise BudgetExhaustedError(
                    f"query of {n} samples would exceed budget "
                    f"{self._budget} (used {self._used})",
                    queries_used=self._used,
                )
            self._used += n
        return predict_proba(self._model, inputs)


@dataclass
class TransferSet:
    """Adversary inputs paired with the oracle's probability outputs.

    Soft labels are stored exactly as returned, never re-normalized.
    """

    inputs: np.ndarray
    soft_labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.soft_labels = np.asarray(self.soft_labels, dtype=np.float32)
        if len(self.inputs) != len(self.soft_labels):
            raise ExperimentError(
                f"{len(self.inputs)} inputs but {len(self.soft_labels)} soft label rows"
            )

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class ExtractionConfig:
    """Budgeted extraction: sampling seed, surrogate family, trainer settings."""

    budget: int
    surrogate_spec: ModelSpec
    surrogate_train: TrainConfig
    seed: int = 0
    query_batch_size: int = 64

    def __post_init__(self):
        if self.budget < 1:
            raise ExperimentError(f"budget must be >= 1, got {self.budget}")
        if self.query_batch_size < 1:
            raise ExperimentError("query_batch_size must be >= 1")


def build_transferset(oracle: Oracle, pool: LabeledDataset, budget: int, seed: int,
                      batch_size: int = 64) -> TransferSet:
    """Query the oracle with `budget` pool samples drawn uniformly without
    replacement, keeping the returned probability rows as soft labels.

    The pool's own labels are discarded: the attacker only ever sees what
    the oracle answers. If the oracle runs out of budget mid-build the error
    propagates and the partial transfer set is discarded.
    """
    if budget < 1:
        raise ExperimentError(f"budget must be >= 1, got {budget}")
    if budget > len(pool):
        raise ExperimentError(
            f"budget {budget} exceeds pool size {len(pool)}"
        )
    picks = np.random.default_rng(seed).permutation(len(pool))[:budget]
    inputs = pool.inputs[picks]
    rows = []
    for start in range(0, budget, batch_size):
        probs = oracle.query(inputs[start:start + batch_size])
        probs = np.asarray(probs, dtype=np.float32)
        sums = probs.sum(axis=1, dtype=np.float64)
        if probs.ndim != 2 or np.any(np.abs(sums - 1.0) > 1e-5):
            raise ExperimentError("oracle returned rows that are not probability vectors")
        rows.append(probs)
    soft = np.concatenate(rows, axis=0)
    return TransferSet(
        inputs=inputs,
        soft_labels=soft,
        provenance={
            "oracle": getattr(oracle, "name", type(oracle).__name__),
            "pool": pool.name,
            "seed": int(seed),
            "budget": int(budget),
        },
    )


def train_surrogate(config: ExtractionConfig, transferset: TransferSet) -> Model:
    """Fresh surrogate fit to the oracle's probability vectors."""
    if len(transferset) == 0:
        raise ExperimentError("empty transferset")
    surrogate = build_model(config.surrogate_spec, seed=config.surrogate_train.seed)
    surrogate, history = train(surrogate, transferset, soft_config(config.surrogate_train))
    surrogate.metadata.update({
        "surrogate": True,
        "transferset": dict(transferset.provenance),
        "train_epochs": config.surrogate_train.max_epochs,
    })
    return surrogate


def extract(oracle: Oracle, pool: LabeledDataset, config: ExtractionConfig,
            heldout: LabeledDataset | None = None, victim: Model | None = None,
            victim_info: dict | None = None) -> tuple[Model, ExtractionReport]:
    """Full extraction: build the transfer set, train the surrogate, report.

    `heldout` and `victim` belong to the auditor, not the attacker; when
    given, the report carries surrogate test accuracy and agreement with the
    victim measured on the heldout set.
    """
    start = time.perf_counter()
    transferset = build_transferset(oracle, pool, config.budget, config.seed,
                                    batch_size=config.query_batch_size)
    surrogate = train_surrogate(config, transferset)
    info = victim_info or {}
    technique = info.get("technique")
    epsilon = info.get("epsilon")
    report = ExtractionReport(
        victim_id=info.get("victim_id", transferset.provenance["oracle"]),
        victim_type=info.get("victim_type", victim_type_for(technique, epsilon)),
        technique=technique,
        epsilon=epsilon,
        budget=config.budget,
        seed=config.surrogate_train.seed,
        test_accuracy=evaluate_accuracy(surrogate, heldout) if heldout is not None else float("nan"),
        agreement=_agreement(surrogate, victim, heldout)
        if (heldout is not None and victim is not None) else float("nan"),
        queries_used=len(transferset),
        provenance=dict(transferset.provenance),
        timing=time.perf_counter() - start,
    )
    return surrogate, report


def save_transferset(transferset: TransferSet, path) -> None:
    """Persist as a manifest header plus the binary tensor record encoding
    shared with model checkpoints."""
    header = {
        "kind": "transferset",
        "provenance": transferset.provenance,
        "count": len(transferset),
        "num_classes": int(transferset.soft_labels.shape[1]),
    }
    _write_container(path, header, {
        "inputs": transferset.inputs,
        "soft_labels": transferset.soft_labels,
    })


def load_transferset(path) -> TransferSet:
    from .errors import CheckpointError

    header, arrays = _read_container(path)
    if header.get("kind") != "transferset":
        raise CheckpointError(f"expected a transferset file, found kind={header.get('kind')!r}")
    if set(arrays) != {"inputs", "soft_labels"}:
        raise CheckpointError("transferset file missing tensor records")
    return TransferSet(inputs=arrays["inputs"], soft_labels=arrays["soft_labels"],
                       provenance=dict(header.get("provenance", {})))
