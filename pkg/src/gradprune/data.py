"""Datasets, triggers, attacker-side poisoning and defender-side SPC splits."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConsistencyError, DataError, FormatError, InputError


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images (N, C, H, W) in [0, 1] with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels)
        if images.ndim != 4:
            raise InputError(f"images must be N x C x H x W, got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ConsistencyError(f"{images.shape[0]} images but labels have shape {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            raise InputError("labels must be integer class indices")
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise InputError("image values must lie in [0, 1]")
        object.__setattr__(self, "images", _frozen(images))
        object.__setattr__(self, "labels", _frozen(labels))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.num_classes != self.num_classes or other.image_shape != self.image_shape:
            raise ConsistencyError("cannot concatenate datasets with different classes or image shapes")
        return LabeledDataset(np.concatenate([self.images, other.images]),
                              np.concatenate([self.labels, other.labels]), self.num_classes)


@dataclass(frozen=True, eq=False)
class PoisonedDataset(LabeledDataset):
    """Attacker training set; row ``k`` came from ``source_indices[k]`` of the clean set."""

    source_indices: np.ndarray = field(default=None)
    poisoned: np.ndarray = field(default=None)

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "source_indices", _frozen(np.asarray(self.source_indices, dtype=np.int64)))
        object.__setattr__(self, "poisoned", _frozen(np.asarray(self.poisoned, dtype=bool)))


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    """A deterministic backdoor trigger.

    ``kind="patch"`` overwrites the rectangle ``patch = (row, col, height,
    width, fill)``; ``kind="blended"`` mixes in ``blend_image`` (C, H, W) with
    ratio ``blend_ratio``.  ``target`` is the attacker's class.
    """

    kind: str
    target: int = 0
    patch: Optional[Tuple[int, int, int, int, float]] = None
    blend_image: Optional[np.ndarray] = None
    blend_ratio: float = 0.0

    def __post_init__(self):
        if self.kind == "patch":
            if self.patch is None or len(self.patch) != 5:
                raise InputError("patch trigger needs (row, col, height, width, fill)")
            row, col, h, w, fill = self.patch
            if row < 0 or col < 0 or h < 1 or w < 1:
                raise InputError(f"invalid patch geometry {self.patch}")
            if not 0.0 <= fill <= 1.0:
                raise InputError("patch fill must lie in [0, 1]")
            object.__setattr__(self, "patch", (int(row), int(col), int(h), int(w), float(fill)))
        elif self.kind == "blended":
            if self.blend_image is None:
                raise InputError("blended trigger needs a trigger image")
            if not 0.0 <= self.blend_ratio <= 1.0:
                raise InputError(f"blend ratio must lie in [0, 1], got {self.blend_ratio}")
            img = np.asarray(self.blend_image, dtype=np.float64)
            if img.ndim != 3:
                raise InputError("blend image must be C x H x W")
            object.__setattr__(self, "blend_image", _frozen(np.clip(img, 0.0, 1.0)))
        else:
            raise InputError(f"unknown trigger kind {self.kind!r}")
        if self.target < 0:
            raise InputError("target class must be non-negative")

    @classmethod
    def badnets(cls, image_shape, size: int = 3, fill: float = 1.0, target: int = 0) -> "TriggerSpec":
        """Square patch in the bottom-right corner."""
        _, h, w = image_shape
        return cls("patch", target=target, patch=(h - size, w - size, size, size, fill))

    @classmethod
    def blended(cls, image_shape, ratio: float = 0.2, target: int = 0, seed: int = 0) -> "TriggerSpec":
        """Blend with a fixed uniform-noise image drawn from ``seed``."""
        pattern = np.random.default_rng(seed).random(tuple(image_shape))
        return cls("blended", target=target, blend_image=pattern, blend_ratio=ratio)

    def check_image_shape(self, image_shape) -> None:
        c, h, w = image_shape
        if self.kind == "patch":
            row, col, ph, pw, _ = self.patch
            if row + ph > h or col + pw > w:
                raise InputError(f"patch {self.patch[:4]} falls outside a {h}x{w} image")
        elif tuple(self.blend_image.shape) != (c, h, w):
            raise InputError(f"blend image shape {self.blend_image.shape} does not match image {(c, h, w)}")

    def apply(self, images: np.ndarray) -> np.ndarray:
        """Triggered copy of an (N, C, H, W) or (C, H, W) array."""
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        batch = images[None] if single else images
        self.check_image_shape(batch.shape[1:])
        if self.kind == "patch":
            row, col, h, w, fill = self.patch
            out = batch.copy()
            out[:, :, row:row + h, col:col + w] = fill
        else:
            lam = self.blend_ratio
            out = np.clip((1.0 - lam) * batch + lam * self.blend_image[None], 0.0, 1.0)
        return out[0] if single else out


def apply_trigger(image, trig: TriggerSpec) -> np.ndarray:
    return trig.apply(image)


def trigger_dataset(ds: LabeledDataset, trig: TriggerSpec) -> LabeledDataset:
    """Triggered images with the original labels kept."""
    return LabeledDataset(trig.apply(ds.images), ds.labels, ds.num_classes)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def class_prototypes(num_classes: int, image_shape) -> np.ndarray:
    """Noise-free base pattern of every class: oriented gratings of differing frequency."""
    c, h, w = image_shape
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    protos = np.empty((num_classes, c, h, w))
    for k in range(num_classes):
        theta = math.pi * k / num_classes
        freq = 1.5 + (k % 3) * 0.75
        for ch in range(c):
            phase = 2 * math.pi * (k / num_classes + ch / max(c, 1) / 3)
            wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
            protos[k, ch] = 0.5 + 0.25 * wave
    return protos


def generate_synthetic(num_classes: int, per_class: int, image_shape=(1, 16, 16), seed: int = 0,
                       noise: float = 0.15) -> LabeledDataset:
    """Class-conditional images: prototype, random contrast and 1-pixel shift, pixel noise.

    Samples are ordered class by class.  The prototypes do not depend on
    ``seed``, so datasets drawn with different seeds share class definitions.
    """
    if num_classes < 2:
        raise InputError("num_classes must be >= 2")
    if per_class < 1:
        raise InputError("per_class must be >= 1")
    image_shape = tuple(int(v) for v in image_shape)
    if len(image_shape) != 3 or min(image_shape) < 1:
        raise InputError(f"image_shape must be (C, H, W), got {image_shape}")
    rng = np.random.default_rng(seed)
    protos = class_prototypes(num_classes, image_shape)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    contrast = rng.uniform(0.7, 1.3, size=n)
    shifts = rng.integers(-1, 2, size=(n, 2))
    pixel_noise = rng.normal(0.0, noise, size=(n,) + image_shape)
    images = np.empty((n,) + image_shape)
    for idx in range(n):
        base = np.roll(protos[labels[idx]], tuple(shifts[idx]), axis=(1, 2))
        images[idx] = 0.5 + contrast[idx] * (base - 0.5)
    images = np.clip(images + pixel_noise, 0.0, 1.0)
    return LabeledDataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08X}, expected 0x{expected_magic:08X}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header < count:
        raise FormatError(f"{path}: truncated IDX body ({len(buf) - header} of {count} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> LabeledDataset:
    """Read an MNIST-style IDX pair; pixels are scaled to [0, 1] and given one channel."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 2
    return LabeledDataset(images[:, None].astype(np.float64) / 255.0, labels, max(num_classes, 2))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


# ---------------------------------------------------------------------------
# attacker and defender data
# ---------------------------------------------------------------------------

def poison_indices(clean: LabeledDataset, trig: TriggerSpec, poison_ratio: float, seed: int) -> np.ndarray:
    """Sorted indices of the ceil(ratio * N) samples to poison, drawn from non-target samples."""
    if not 0.0 < poison_ratio < 1.0:
        raise InputError(f"poison_ratio must lie in (0, 1), got {poison_ratio}")
    n_poison = math.ceil(poison_ratio * len(clean))
    candidates = np.flatnonzero(clean.labels != trig.target)
    if n_poison > candidates.size:
        raise DataError(f"need {n_poison} non-target samples to poison, only {candidates.size} available")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(candidates, size=n_poison, replace=False))


def poison_training_set(clean: LabeledDataset, trig: TriggerSpec, poison_ratio: float, seed: int) -> PoisonedDataset:
    """Trigger a seeded ceil(ratio * N) subset, relabel it to the target, shuffle everything.

    Only samples whose label differs from the target are eligible, so exactly
    ceil(ratio * N) labels change.
    """
    trig.check_image_shape(clean.image_shape)
    if trig.target >= clean.num_classes:
        raise InputError(f"target {trig.target} outside [0, {clean.num_classes})")
    chosen = poison_indices(clean, trig, poison_ratio, seed)
    images = np.array(clean.images)
    labels = np.array(clean.labels)
    images[chosen] = trig.apply(images[chosen])
    labels[chosen] = trig.target
    flag = np.zeros(len(clean), dtype=bool)
    flag[chosen] = True
    order = np.random.default_rng([seed, 1]).permutation(len(clean))
    return PoisonedDataset(images[order], labels[order], clean.num_classes,
                           source_indices=order, poisoned=flag[order])


@dataclass(frozen=True, eq=False)
class DefenderDataset:
    """Defender's SPC-limited data and its triggered twins (original labels kept)."""

    clean_train: LabeledDataset
    clean_val: LabeledDataset
    backdoor_train: LabeledDataset
    backdoor_val: LabeledDataset
    train_indices: np.ndarray = field(default=None)
    val_indices: np.ndarray = field(default=None)

    @property
    def spc(self) -> int:
        counts = self.clean_train.class_counts() + self.clean_val.class_counts()
        return int(counts.max())


def validation_count(spc: int) -> int:
    """Validation samples per class: 10% rounded up, at least one, never all."""
    if spc < 2:
        raise InputError("spc must be >= 2 to leave both a training and a validation sample")
    return min(spc - 1, max(1, math.ceil(0.1 * spc)))


def split_defender_samples(clean: LabeledDataset, trig: TriggerSpec, seed: int,
                           source_indices: Optional[Sequence[int]] = None) -> DefenderDataset:
    """Split the defender's clean samples per class into train/val and build triggered twins.

    Every class must hold the same number of samples.
    """
    trig.check_image_shape(clean.image_shape)
    counts = clean.class_counts()
    present = counts[counts > 0]
    if present.size == 0 or present.min() != present.max():
        raise DataError(f"defender samples must be balanced across classes, got counts {counts.tolist()}")
    spc = int(present[0])
    n_val = validation_count(spc)
    rng = np.random.default_rng([seed, 2])
    train_idx, val_idx = [], []
    for k in range(clean.num_classes):
        members = np.flatnonzero(clean.labels == k)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        val_idx.append(members[:n_val])
        train_idx.append(members[n_val:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    val_idx = np.concatenate(val_idx)
    clean_train, clean_val = clean.subset(train_idx), clean.subset(val_idx)
    src = np.arange(len(clean)) if source_indices is None else np.asarray(source_indices, dtype=np.int64)
    return DefenderDataset(clean_train, clean_val, trigger_dataset(clean_train, trig), trigger_dataset(clean_val, trig),
                           train_indices=src[train_idx], val_indices=src[val_idx])


def make_defender_split(pool: LabeledDataset, spc: int, trig: TriggerSpec, seed: int) -> DefenderDataset:
    """Draw ``spc`` samples per class from ``pool`` and split them for the defender.

    Validation takes 10% of each class (rounded up, at least one); with
    ``spc=2`` that is one training and one validation sample per class.
    ``train_indices``/``val_indices`` refer to rows of ``pool``.
    """
    validation_count(spc)
    counts = pool.class_counts()
    short = [k for k in range(pool.num_classes) if counts[k] < spc]
    if short:
        raise DataError(f"pool has fewer than {spc} samples for classes {short}")
    rng = np.random.default_rng([seed, spc])
    picked = np.concatenate([
        rng.choice(np.flatnonzero(pool.labels == k), size=spc, replace=False) for k in range(pool.num_classes)
    ])
    return split_defender_samples(pool.subset(picked), trig, seed, source_indices=picked)
