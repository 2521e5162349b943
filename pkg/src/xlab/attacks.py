"""Signed-gradient evasion attacks and adversarial training.

Both attacks perturb inputs inside an L-inf ball of radius epsilon,
intersected with the [0, 1] pixel range. The single-step attack moves the
full radius along the sign of the input gradient of the loss; the iterated
variant takes T smaller signed steps, projecting the accumulated
perturbation back into the ball after each one. With T=1 and step size equal
to the radius the iterated attack reduces exactly (bitwise) to the
single-step one.

Adversarial training here is static augmentation: craft one adversarial
example per training input against the converged naturally trained model,
append them with their original labels, and retrain a fresh model from
scratch on the doubled set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import ROLE_ADVERSARY_POOL, LabeledDataset, concat_datasets
from .errors import AttackError
from .models import Model, ModelSpec, build_model
from .training import TrainConfig, TrainHistory, train

TECHNIQUES = ("fgsm", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    """Perturbation budget and iteration schedule.

    step_size defaults to 2.5 * epsilon / steps, which lets the iterate
    wander before the projection binds. full_step() instead uses the whole
    radius per step, saturating the ball immediately.
    """

    technique: str
    epsilon: float
    steps: int = 10
    step_size: float | None = None
    random_start: bool = False
    seed: int | None = None
    clamp: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise AttackError(f"unknown technique {self.technique!r}; expected one of {TECHNIQUES}")
        if not 0.0 < self.epsilon <= 0.5:
            raise AttackError(f"epsilon must be in (0, 0.5], got {self.epsilon}")
        if self.steps < 1:
            raise AttackError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise AttackError(f"step_size must be > 0, got {self.step_size}")
        if self.random_start and self.seed is None:
            raise AttackError("random_start requires a seed for determinism")
        if tuple(self.clamp) != (0.0, 1.0):
            raise AttackError("clamp range is fixed to the [0, 1] input scale")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps

    @staticmethod
    def single_step(epsilon: float) -> "AttackConfig":
        return AttackConfig(technique="fgsm", epsilon=epsilon, steps=1)

    @staticmethod
    def iterated(epsilon: float, steps: int = 10, step_size: float | None = None,
                 random_start: bool = False, seed: int | None = None) -> "AttackConfig":
        return AttackConfig(technique="pgd", epsilon=epsilon, steps=steps,
                            step_size=step_size, random_start=random_start, seed=seed)

    @staticmethod
    def full_step(epsilon: float, steps: int = 10) -> "AttackConfig":
        """Step size equal to the full radius; the first step saturates the
        ball and later steps only flip saturated coordinates."""
        return AttackConfig(technique="pgd", epsilon=epsilon, steps=steps, step_size=epsilon)


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy loss with respect to the input batch.

    Parameters are frozen for the pass: attacks only consume the input
    gradient, and skipping parameter gradients roughly halves the cost.
    """
    xt = T.Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
    frozen = [p for p in model.params.values() if p.requires_grad]
    for p in frozen:
        p.requires_grad = False
    try:
        logits = model.forward(xt, training=False)
        onehot = np.eye(model.spec.num_classes, dtype=np.float32)[np.asarray(y, dtype=np.int64)]
        loss = T.cross_entropy(T.log_softmax(logits), onehot)
        loss.backward()
    finally:
        for p in frozen:
            p.requires_grad = True
    return xt.grad


def fgsm(model: Model, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """One signed-gradient step of size epsilon, clamped to [0, 1].

    sign(0) is 0, so zero-gradient coordinates stay put. epsilon may be 0,
    in which case the input is returned unchanged.
    """
    if not 0.0 <= epsilon <= 0.5:
        raise AttackError(f"epsilon out of range [0, 0.5]: {epsilon}")
    x = np.asarray(x, dtype=np.float32)
    if epsilon == 0.0:
        return x.copy()
    g = input_gradient(model, x, y)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0)


def pgd(model: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> np.ndarray:
    """Iterated signed-gradient steps with projection onto the L-inf ball.

    Each step evaluates the gradient at the current (clamped) iterate, adds
    alpha * sign(grad) to the accumulated perturbation, and clips the
    perturbation back to [-epsilon, epsilon]. The returned batch always
    satisfies max|x_adv - x| <= epsilon and lies in [0, 1].
    """
    if config.technique != "pgd":
        raise AttackError(f"pgd called with technique {config.technique!r}")
    x = np.asarray(x, dtype=np.float32)
    eps = config.epsilon
    alpha = config.alpha
    if config.random_start:
        rng = np.random.default_rng(config.seed)
        delta = rng.uniform(-eps, eps, size=x.shape).astype(np.float32)
    else:
        delta = np.zeros_like(x)
    for _ in range(config.steps):
        xt = np.clip(x + delta, 0.0, 1.0)
        g = input_gradient(model, xt, y)
        delta = np.clip(delta + alpha * np.sign(g), -eps, eps)
    return np.clip(x + delta, 0.0, 1.0)


def perturb(model: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> np.ndarray:
    if config.technique == "fgsm":
        return fgsm(model, x, y, config.epsilon)
    return pgd(model, x, y, config)


def craft_adversarial_set(model: Model, dataset: LabeledDataset, config: AttackConfig,
                          batch_size: int = 64) -> LabeledDataset:
    """One adversarial example per input, labels copied from the originals."""
    if dataset.role == ROLE_ADVERSARY_POOL:
        raise AttackError("adversarial sets are crafted from victim-train or heldout-test data")
    out = np.empty_like(dataset.inputs)
    for start in range(0, len(dataset), batch_size):
        stop = start + batch_size
        cfg = config
        if config.random_start:
            cfg = replace(config, seed=config.seed + start)
        out[start:stop] = perturb(model, dataset.inputs[start:stop],
                                  dataset.labels[start:stop], cfg)
    return LabeledDataset(
        inputs=out,
        labels=dataset.labels.copy(),
        name=f"{dataset.name}-adv-{config.technique}-{config.epsilon:g}",
        role=dataset.role,
        metadata={**dataset.metadata, "technique": config.technique,
                  "epsilon": config.epsilon, "source": dataset.name},
    )


@dataclass(frozen=True)
class AdvTrainConfig:
    """Static-augmentation adversarial training: adversarial copies of the
    whole training set are appended, doubling it."""

    attack: AttackConfig
    augmentation_mode: str = "append"
    label_source: str = "ground-truth"

    def __post_init__(self):
        if self.augmentation_mode != "append":
            raise AttackError(f"unsupported augmentation_mode {self.augmentation_mode!r}")
        if self.label_source != "ground-truth":
            raise AttackError(f"unsupported label_source {self.label_source!r}")


def adversarial_train(spec: ModelSpec, dataset: LabeledDataset, adv_config: AdvTrainConfig,
                      train_config: TrainConfig, natural_model: Model | None = None,
                      ) -> tuple[Model, TrainHistory]:
    """Train naturally, craft adversarial copies against the converged model,
    then retrain a freshly initialized model on the doubled set.

    A pre-trained natural model may be passed in to avoid repeating the first
    stage; it must come from the same spec, dataset, and train_config for the
    result to be reproducible.
    """
    if natural_model is None:
        natural_model, _ = train(build_model(spec, train_config.seed), dataset, train_config)
    adv_set = craft_adversarial_set(natural_model, dataset, adv_config.attack)
    augmented = concat_datasets(dataset, adv_set, name=f"{dataset.name}+adv", role=dataset.role)
    robust = build_model(spec, train_config.seed)
    robust, history = train(robust, augmented, train_config)
    robust.metadata.update({
        "adv_trained": True,
        "technique": adv_config.attack.technique,
        "epsilon": adv_config.attack.epsilon,
        "train_epochs": train_config.max_epochs,
        "train_seed": train_config.seed,
    })
    return robust, history
