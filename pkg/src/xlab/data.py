"""Dataset ingestion and generation.

Inputs are kept in [0, 1] rather than mean/std standardized so that L-inf
perturbation radii are expressed in raw pixel units, the same scale the
attack sweeps use. Three roles exist: the victim's training data, the
out-of-distribution pool the adversary queries with, and a heldout test set
that neither training nor transfer-set construction may touch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

ROLE_VICTIM_TRAIN = "victim-train"
ROLE_ADVERSARY_POOL = "adversary-pool"
ROLE_HELDOUT_TEST = "heldout-test"
ROLES = (ROLE_VICTIM_TRAIN, ROLE_ADVERSARY_POOL, ROLE_HELDOUT_TEST)


@dataclass
class LabeledDataset:
    """Images with hard integer labels.

    inputs: N x C x H x W float32, every value in [0, 1].
    labels: N integer class ids.
    """

    inputs: np.ndarray
    labels: np.ndarray
    name: str
    role: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise DatasetError(f"inputs must be NxCxHxW, got shape {self.inputs.shape}")
        if len(self.labels) != len(self.inputs):
            raise DatasetError(
                f"{len(self.inputs)} inputs but {len(self.labels)} labels"
            )
        if self.labels.size and self.labels.min() < 0:
            raise DatasetError("negative label")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise DatasetError("input values outside [0, 1]")
        if self.role not in ROLES:
            raise DatasetError(f"unknown role {self.role!r}; expected one of {ROLES}")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def num_classes(self) -> int:
        if "num_classes" in self.metadata:
            return int(self.metadata["num_classes"])
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])


def concat_datasets(a: LabeledDataset, b: LabeledDataset, name: str, role: str | None = None) -> LabeledDataset:
    if a.input_shape != b.input_shape:
        raise DatasetError(f"input shapes differ: {a.input_shape} vs {b.input_shape}")
    return LabeledDataset(
        inputs=np.concatenate([a.inputs, b.inputs], axis=0),
        labels=np.concatenate([a.labels, b.labels], axis=0),
        name=name,
        role=role or a.role,
        metadata={"num_classes": max(a.num_classes, b.num_classes)},
    )


def _read_be_u32(f, what: str) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise DatasetError(f"truncated file while reading {what}")
    return struct.unpack(">I", data)[0]


def load_idx(images_path, labels_path, *, name: str = "idx", role: str = ROLE_VICTIM_TRAIN,
             num_classes: int | None = None) -> LabeledDataset:
    """Load the big-endian IDX container (magic, counts, then raw bytes).

    Pixels are scaled to [0, 1] by dividing by 255. Counts in the two files
    must agree, and labels must stay below num_classes when it is given.
    """
    with open(images_path, "rb") as f:
        magic = _read_be_u32(f, "images magic")
        if magic != IDX_IMAGES_MAGIC:
            raise DatasetError(
                f"bad magic 0x{magic:08x} in images file (expected 0x{IDX_IMAGES_MAGIC:08x})"
            )
        count = _read_be_u32(f, "image count")
        rows = _read_be_u32(f, "rows")
        cols = _read_be_u32(f, "cols")
        payload = f.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise DatasetError(
                f"truncated image payload: expected {count * rows * cols} bytes, got {len(payload)}"
            )
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as f:
        magic = _read_be_u32(f, "labels magic")
        if magic != IDX_LABELS_MAGIC:
            raise DatasetError(
                f"bad magic 0x{magic:08x} in labels file (expected 0x{IDX_LABELS_MAGIC:08x})"
            )
        label_count = _read_be_u32(f, "label count")
        if label_count != count:
            raise DatasetError(f"count mismatch: {count} images but {label_count} labels")
        label_bytes = f.read(label_count)
        if len(label_bytes) != label_count:
            raise DatasetError(
                f"truncated label payload: expected {label_count} bytes, got {len(label_bytes)}"
            )
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise DatasetError(f"label {labels.max()} out of range for {num_classes} classes")

    metadata = {"source": str(images_path)}
    if num_classes is not None:
        metadata["num_classes"] = num_classes
    return LabeledDataset(
        inputs=images.astype(np.float32) / np.float32(255.0),
        labels=labels,
        name=name,
        role=role,
        metadata=metadata,
    )


@dataclass(frozen=True)
class SynthConfig:
    """Seeded synthetic image classes: a per-class template plus uniform
    pixel noise, clamped to [0, 1].

    Two template styles exist. "patch" puts the class signal in one small
    high-contrast patch at a class-specific location over a background shared
    by all classes; robust features are then localized, the way object
    evidence is in natural images. "field" makes the whole image a smooth
    class-specific random field; with many classes and high noise it yields a
    broad, diverse cloud, which is what an out-of-distribution query pool
    should look like.

    template_seed fixes the class patterns; seed drives the noise draws, so
    two configs sharing template_seed describe the same task. Noise must stay
    below 0.5 to keep the class templates separable.
    """

    num_classes: int
    per_class: int
    side: int
    seed: int
    template_seed: int = 0
    noise: float = 0.25
    channels: int = 1
    style: str = "patch"
    patch_size: int = 4
    patch_contrast: float = 0.5

    def __post_init__(self):
        if self.num_classes < 2:
            raise DatasetError("num_classes must be >= 2")
        if self.per_class < 1 or self.side < 2 or self.channels < 1:
            raise DatasetError("per_class, side, channels must be positive")
        if not 0.0 <= self.noise < 0.5:
            raise DatasetError(f"noise amplitude must be in [0, 0.5), got {self.noise}")
        if self.style not in ("patch", "field"):
            raise DatasetError(f"unknown template style {self.style!r}")
        if self.style == "patch":
            if self.patch_size < 1 or self.patch_size > self.side:
                raise DatasetError("patch_size must fit inside the image")


def _box_blur(img: np.ndarray, passes: int = 2) -> np.ndarray:
    out = img
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        acc = np.zeros_like(out)
        for di in range(3):
            for dj in range(3):
                acc += padded[di:di + out.shape[0], dj:dj + out.shape[1]]
        out = acc / 9.0
    return out


def _smooth_field(rng, side: int, lo: float = 0.15, hi: float = 0.85) -> np.ndarray:
    raw = _box_blur(rng.uniform(0.0, 1.0, size=(side, side)))
    rmin, rmax = raw.min(), raw.max()
    span = rmax - rmin if rmax > rmin else 1.0
    return (lo + (hi - lo) * (raw - rmin) / span).astype(np.float32)


def class_templates(config: SynthConfig) -> np.ndarray:
    """Per-class templates in [0, 1], shape K x C x H x W."""
    rng = np.random.default_rng(config.template_seed)
    k, ch, side = config.num_classes, config.channels, config.side
    templates = np.empty((k, ch, side, side), np.float32)
    if config.style == "field":
        for c in range(k):
            for i in range(ch):
                templates[c, i] = _smooth_field(rng, side)
        return templates
    # patch style: one shared background, one signed high-contrast patch per
    # class in a class-specific grid cell; cells stay distinct while they
    # last, then repeat with fresh patterns
    background = np.stack([_smooth_field(rng, side, 0.30, 0.70) for _ in range(ch)])
    ps = config.patch_size
    cells_per_row = side // ps
    n_cells = cells_per_row * cells_per_row
    if k <= n_cells:
        cells = rng.permutation(n_cells)[:k]
    else:
        cells = np.concatenate([rng.permutation(n_cells)
                                for _ in range(-(-k // n_cells))])[:k]
    for c in range(k):
        templates[c] = background
        row, col = divmod(int(cells[c]), cells_per_row)
        pattern = rng.choice([-1.0, 1.0], size=(ch, ps, ps)) * config.patch_contrast
        region = templates[c, :, row * ps:(row + 1) * ps, col * ps:(col + 1) * ps]
        templates[c, :, row * ps:(row + 1) * ps, col * ps:(col + 1) * ps] = np.clip(
            region + pattern.astype(np.float32), 0.0, 1.0)
    return templates


def synth_generate(config: SynthConfig, *, name: str = "synth",
                   role: str = ROLE_VICTIM_TRAIN) -> LabeledDataset:
    """Deterministic balanced dataset: exactly per_class samples per class."""
    templates = class_templates(config)
    rng = np.random.default_rng(config.seed)
    n = config.num_classes * config.per_class
    inputs = np.empty((n, config.channels, config.side, config.side), np.float32)
    labels = np.empty(n, np.int64)
    for c in range(config.num_classes):
        lo = c * config.per_class
        noise = rng.uniform(-config.noise, config.noise,
                            size=(config.per_class, config.channels, config.side, config.side))
        inputs[lo:lo + config.per_class] = np.clip(templates[c] + noise, 0.0, 1.0).astype(np.float32)
        labels[lo:lo + config.per_class] = c
    order = rng.permutation(n)
    return LabeledDataset(
        inputs=inputs[order],
        labels=labels[order],
        name=name,
        role=role,
        metadata={"num_classes": config.num_classes, "synth_seed": config.seed,
                  "template_seed": config.template_seed, "noise": config.noise},
    )


def batches(dataset: LabeledDataset, batch_size: int, shuffle_seed: int | None = None):
    """Yield (inputs, labels) batches covering the dataset exactly once.

    Order is the dataset's own when shuffle_seed is None, otherwise a
    permutation determined by the seed. The final batch may be short.
    """
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle_seed is None:
        index = np.arange(n)
    else:
        index = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        sel = index[start:start + batch_size]
        yield dataset.inputs[sel], dataset.labels[sel]
