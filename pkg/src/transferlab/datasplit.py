"""Synthetic labeled datasets, seeded class splits, and per-class reduction.

The toy generator stands in for a large natural-image corpus: each class is a
distinct parametric texture (an oriented grating with a class-specific angle
and spatial frequency) corrupted by per-example nuisance factors (phase,
amplitude, pixel noise). Classes are therefore separable by a small CNN while
nearby orientations still confuse each other, which keeps accuracy off the
ceiling. Real data can be plugged in by constructing LabeledDataset directly;
nothing downstream knows where the arrays came from.

Everything here is pure given seeds. Datasets are immutable after
construction.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .errors import InputError

SIDES = ("A", "B")


@dataclass(frozen=True)
class LabeledDataset:
    """Images with dense integer labels.

    ``classes`` holds the original class ids in label order: an example with
    label k belongs to class ``classes[k]``. ``example_ids`` are unique within
    a generation run and survive restriction/reduction, so train/validation
    disjointness can be checked by id.
    """

    images: np.ndarray
    labels: np.ndarray
    classes: tuple[str, ...]
    role: str
    example_ids: np.ndarray
    dataset_id: str

    def __post_init__(self):
        if self.role not in ("train", "validation"):
            raise InputError(f"role must be train or validation, got {self.role!r}")
        if self.images.ndim != 4:
            raise InputError(f"images must be 4D (N,C,H,W), got ndim={self.images.ndim}")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.example_ids.shape != (n,):
            raise InputError("labels and example_ids must match the image count")
        if len(set(self.example_ids.tolist())) != n:
            raise InputError("example_ids must be unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise InputError("label outside the class list")
        if len(set(self.classes)) != len(self.classes):
            raise InputError("duplicate class ids")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(self.classes, 0)
        for lab in self.labels.tolist():
            counts[self.classes[lab]] += 1
        return counts


@dataclass(frozen=True)
class ClassSplit:
    """A two-way partition of a class set.

    method is "random", "semantic", or "manual"; seed is meaningful only for
    random splits.
    """

    assignment: dict[str, str]
    method: str
    seed: int | None = None

    def __post_init__(self):
        if self.method not in ("random", "semantic", "manual"):
            raise InputError(f"unknown split method {self.method!r}")
        bad = {s for s in self.assignment.values() if s not in SIDES}
        if bad:
            raise InputError(f"sides must be A or B, got {sorted(bad)}")

    def side_of(self, class_id: str) -> str:
        try:
            return self.assignment[class_id]
        except KeyError:
            raise InputError(f"class {class_id!r} is not covered by the split") from None

    def classes_on(self, side: str) -> tuple[str, ...]:
        if side not in SIDES:
            raise InputError(f"side must be A or B, got {side!r}")
        return tuple(c for c in sorted(self.assignment) if self.assignment[c] == side)


def split_random(classes, seed: int) -> ClassSplit:
    """Randomly halve a class set; side sizes differ by at most one."""
    classes = list(classes)
    if len(classes) < 2:
        raise InputError(f"need at least 2 classes to split, got {len(classes)}")
    if len(set(classes)) != len(classes):
        raise InputError("duplicate class ids")
    order = rng.stream(rng.SPLIT, seed).permutation(len(classes))
    n_a = (len(classes) + 1) // 2
    a_set = {classes[i] for i in order[:n_a]}
    assignment = {c: ("A" if c in a_set else "B") for c in classes}
    return ClassSplit(assignment=assignment, method="random", seed=seed)


def restrict(dataset: LabeledDataset, split: ClassSplit, side: str) -> LabeledDataset:
    """Keep only one side's examples, relabeling densely.

    The filtered class list preserves the dataset's class order, and labels
    are re-indexed against it, so the classifier head width equals the active
    class count.
    """
    if side not in SIDES:
        raise InputError(f"side must be A or B, got {side!r}")
    kept = tuple(c for c in dataset.classes if split.side_of(c) == side)
    new_label = {dataset.classes.index(c): i for i, c in enumerate(kept)}
    mask = np.array([lab in new_label for lab in dataset.labels.tolist()])
    labels = np.array([new_label[lab] for lab in dataset.labels[mask].tolist()],
                      dtype=np.int64)
    return LabeledDataset(
        images=dataset.images[mask],
        labels=labels,
        classes=kept,
        role=dataset.role,
        example_ids=dataset.example_ids[mask],
        dataset_id=f"{dataset.dataset_id}/{side}",
    )


def reduce_per_class(dataset: LabeledDataset, cap: int, seed: int = 0) -> LabeledDataset:
    """Cap every class at ``cap`` training examples.

    Selection ranks each class's examples by a seeded per-example draw, so a
    smaller cap always selects a subset of a larger cap's selection and
    re-reducing an already reduced dataset changes nothing. Validation-role
    datasets pass through untouched.
    """
    if cap < 1:
        raise InputError(f"cap must be >= 1, got {cap}")
    if dataset.role == "validation":
        return dataset
    keep = np.zeros(len(dataset), dtype=bool)
    for lab in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == lab)
        ranked = sorted(
            idx.tolist(),
            key=lambda i: (rng.derive_seed(rng.REDUCE, seed, dataset.classes[lab],
                                           int(dataset.example_ids[i])), i),
        )
        keep[ranked[:cap]] = True
    return LabeledDataset(
        images=dataset.images[keep],
        labels=dataset.labels[keep],
        classes=dataset.classes,
        role=dataset.role,
        example_ids=dataset.example_ids[keep],
        dataset_id=f"{dataset.dataset_id}@cap{cap}",
    )


def class_pattern(class_index: int, num_classes: int) -> tuple[float, float]:
    """Deterministic (orientation, frequency) for a class, independent of seed.

    Orientations spread evenly over a half turn; frequency cycles through
    three shared bands. The bands give every class subset the same low-level
    vocabulary (so first-layer features stay fairly general), while the
    specific angle-band conjunctions present on one side of a split differ
    from the other side's, which is what makes deep-layer features
    side-specific.
    """
    theta = np.pi * class_index / num_classes
    freq = 1.5 + 0.8 * (class_index % 3)
    return theta, freq


def _render(labels: np.ndarray, num_classes: int, image_size: int,
            noise: float, jitter: float, gen: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    coords = np.arange(image_size, dtype=np.float64) / image_size
    u = coords[None, :].repeat(image_size, axis=0)
    v = coords[:, None].repeat(image_size, axis=1)
    phase = gen.uniform(0.0, 2 * np.pi, n)
    amp = gen.uniform(0.8, 1.2, n)
    wobble = gen.normal(0.0, jitter, n)
    stretch = gen.normal(1.0, jitter, n)
    pixels = gen.normal(0.0, noise, (n, image_size, image_size))
    for i, lab in enumerate(labels.tolist()):
        theta, freq = class_pattern(lab, num_classes)
        theta = theta + wobble[i]
        freq = freq * max(0.2, stretch[i])
        wave = 2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta))
        pixels[i] += amp[i] * np.cos(wave + phase[i])
    return pixels[:, None, :, :].astype(np.float32)


def toy_dataset(num_classes: int = 20, per_class: int = 100, image_size: int = 12,
                seed: int = 0, val_per_class: int | None = None,
                noise: float = 0.35, jitter: float = 0.0,
                ) -> tuple[LabeledDataset, LabeledDataset]:
    """Generate matched train and validation datasets.

    ``noise`` is the per-pixel Gaussian corruption; ``jitter`` wobbles each
    example's orientation (radians) and frequency (relative), blurring the
    class boundaries. Together they set task difficulty. Train and validation
    use independent noise streams, so their examples are distinct draws even
    though the class patterns coincide. Returns the pair (train, validation).
    """
    if num_classes < 2:
        raise InputError(f"need at least 2 classes, got {num_classes}")
    if per_class < 1 or image_size < 2:
        raise InputError("per_class must be >= 1 and image_size >= 2")
    if val_per_class is None:
        val_per_class = max(1, per_class // 4)
    classes = tuple(f"c{k:02d}" for k in range(num_classes))
    dataset_id = f"toy{num_classes}x{per_class}s{image_size}#seed{seed}"

    def build(role, count, tag, id_base):
        labels = np.repeat(np.arange(num_classes, dtype=np.int64), count)
        images = _render(labels, num_classes, image_size, noise, jitter,
                         rng.stream(tag, seed))
        ids = np.arange(id_base, id_base + labels.shape[0], dtype=np.int64)
        return LabeledDataset(images=images, labels=labels, classes=classes,
                              role=role, example_ids=ids, dataset_id=dataset_id)

    train = build("train", per_class, rng.DATA_TRAIN, 0)
    val = build("validation", val_per_class, rng.DATA_VAL, len(train))
    return train, val


def as_validation(dataset: LabeledDataset) -> LabeledDataset:
    """Relabel a dataset's role (the arrays are shared, not copied)."""
    return replace(dataset, role="validation")


def write_split(path, split: ClassSplit) -> None:
    """Persist a split manifest: a header comment with the regeneration
    parameters, then one ``class_id,side`` row per class."""
    lines = ["# transferlab split manifest"]
    meta = f"# method={split.method}"
    if split.seed is not None:
        meta += f" seed={split.seed}"
    lines.append(meta)
    lines.append("class_id,side")
    for c in sorted(split.assignment):
        lines.append(f"{c},{split.assignment[c]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_split(path) -> ClassSplit:
    method, seed = "manual", None
    assignment = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if token.startswith("method="):
                        method = token.split("=", 1)[1]
                    elif token.startswith("seed="):
                        seed = int(token.split("=", 1)[1])
                continue
            if line == "class_id,side":
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise InputError(f"bad manifest row {line!r}")
            assignment[parts[0]] = parts[1]
    if not assignment:
        raise InputError(f"split manifest {path} has no assignments")
    return ClassSplit(assignment=assignment, method=method, seed=seed)
