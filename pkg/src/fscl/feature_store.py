"""On-disk feature-tensor format, session splitting, and synthetic data.

A feature store holds labeled C×H×W activation maps (non-negative float32),
the released form of privacy-preserving shallow-network features.  The file
layout is a little-endian binary:

    magic  b"FSCL"
    u32    version (currently 1)
    u32    class_count
    u32,u32,u32  C, H, W
    u64    sample_count
    then per sample: u32 label | C*H*W float32 values

Loading a file written by :func:`write_feature_store` reproduces the dataset
bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InvalidDatasetError,
    LabelRangeError,
    SplitError,
    TruncatedFileError,
)

MAGIC = b"FSCL"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")  # magic, version, classes, C, H, W, count


@dataclass
class Dataset:
    """Labeled feature maps packed into contiguous arrays.

    ``features`` has shape (n, C, H, W) float32 and ``labels`` shape (n,)
    int64.  All entries must be finite and >= 0 and every label must be
    below ``n_classes``.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 4:
            raise InvalidDatasetError(
                f"features must be (n, C, H, W), got shape {self.features.shape}"
            )
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidDatasetError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.features.shape[0]} samples"
            )
        if not np.all(np.isfinite(self.features)):
            raise InvalidDatasetError("features contain non-finite entries")
        if self.features.size and self.features.min() < 0:
            raise InvalidDatasetError("features contain negative entries")
        if self.n_classes < 0:
            raise InvalidDatasetError("n_classes must be >= 0")
        if self.labels.size:
            if self.labels.min() < 0:
                raise LabelRangeError("negative label")
            if self.labels.max() >= self.n_classes:
                raise LabelRangeError(
                    f"label {int(self.labels.max())} >= class count {self.n_classes}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        """(C, H, W) of a single feature map."""
        return tuple(self.features.shape[1:])  # type: ignore[return-value]

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        """New dataset holding the given sample indices (copied)."""
        return Dataset(
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            n_classes=self.n_classes,
            split=self.split if split is None else split,
        )

    def class_indices(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)


@dataclass
class SessionSpec:
    """B base classes plus S incremental sessions of N classes, K shots each."""

    base_classes: list[int]
    sessions: list[list[int]]
    shots_per_class: int
    seed: int = 0

    def __post_init__(self):
        groups = [self.base_classes] + list(self.sessions)
        seen: set[int] = set()
        for group in groups:
            for cls in group:
                if cls in seen:
                    raise SplitError(f"class {cls} appears in more than one session")
                seen.add(cls)
        if self.sessions and self.shots_per_class < 1:
            raise SplitError("shots_per_class must be >= 1 when sessions exist")

    @property
    def all_classes(self) -> list[int]:
        out = list(self.base_classes)
        for group in self.sessions:
            out.extend(group)
        return out

    def classes_through(self, session: int) -> list[int]:
        """Classes seen up to and including session index (0 = base)."""
        out = list(self.base_classes)
        for group in self.sessions[:session]:
            out.extend(group)
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "base_classes": self.base_classes,
                "sessions": self.sessions,
                "shots_per_class": self.shots_per_class,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SessionSpec":
        doc = json.loads(text)
        return cls(
            base_classes=[int(c) for c in doc["base_classes"]],
            sessions=[[int(c) for c in grp] for grp in doc["sessions"]],
            shots_per_class=int(doc["shots_per_class"]),
            seed=int(doc.get("seed", 0)),
        )


@dataclass
class SessionSplits:
    """Output of :func:`make_session_splits`.

    ``incremental[b]`` is the (K-shot train set, cumulative test set) pair for
    session b+1; the cumulative test set covers every class seen so far.
    """

    base_train: Dataset
    base_test: Dataset
    incremental: list[tuple[Dataset, Dataset]] = field(default_factory=list)

    @property
    def n_sessions(self) -> int:
        """Total session count including the base session."""
        return 1 + len(self.incremental)


def write_feature_store(dataset: Dataset, path: str | Path) -> None:
    """Write the dataset in the binary feature-store layout."""
    c, h, w = dataset.shape
    header = _HEADER.pack(MAGIC, VERSION, dataset.n_classes, c, h, w, len(dataset))
    with open(path, "wb") as fh:
        fh.write(header)
        for i in range(len(dataset)):
            fh.write(struct.pack("<I", int(dataset.labels[i])))
            fh.write(dataset.features[i].astype("<f4", copy=False).tobytes())


def load_feature_store(path: str | Path, split: str = "train") -> Dataset:
    """Read a feature-store file back into a :class:`Dataset`.

    Raises :class:`FormatError` on a bad magic/version, and
    :class:`TruncatedFileError` if the payload ends before the sample count
    declared in the header.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than header")
    magic, version, n_classes, c, h, w, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    per_sample = 4 + 4 * c * h * w
    expected = _HEADER.size + count * per_sample
    if len(raw) < expected:
        raise TruncatedFileError(
            f"{path}: expected {expected} bytes for {count} samples, got {len(raw)}"
        )
    features = np.empty((count, c, h, w), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    offset = _HEADER.size
    for i in range(count):
        (label,) = struct.unpack_from("<I", raw, offset)
        if label >= n_classes:
            raise LabelRangeError(
                f"{path}: sample {i} label {label} >= class count {n_classes}"
            )
        labels[i] = label
        offset += 4
        features[i] = np.frombuffer(
            raw, dtype="<f4", count=c * h * w, offset=offset
        ).reshape(c, h, w)
        offset += 4 * c * h * w
    return Dataset(features=features, labels=labels, n_classes=n_classes, split=split)


def make_session_splits(
    train: Dataset, test: Dataset, spec: SessionSpec
) -> SessionSplits:
    """Carve train/test datasets into the base + incremental session layout.

    Base sets keep every train/test sample of the base classes.  Each
    incremental session contributes exactly K seeded, uniformly drawn train
    samples per class; its test set is cumulative over all classes seen so
    far.  Sampling depends only on ``spec.seed``.
    """
    if train.shape != test.shape:
        raise SplitError(
            f"train shape {train.shape} != test shape {test.shape}"
        )
    for cls in spec.all_classes:
        if cls >= train.n_classes:
            raise SplitError(f"class {cls} not present in dataset header")

    def by_classes(ds: Dataset, classes: list[int], split: str) -> Dataset:
        mask = np.isin(ds.labels, classes)
        return ds.subset(np.flatnonzero(mask), split=split)

    base_train = by_classes(train, spec.base_classes, "train")
    base_test = by_classes(test, spec.base_classes, "test")

    rng = np.random.default_rng(spec.seed)
    incremental: list[tuple[Dataset, Dataset]] = []
    for b, group in enumerate(spec.sessions, start=1):
        shot_idx: list[np.ndarray] = []
        for cls in group:
            pool = train.class_indices(cls)
            if pool.size < spec.shots_per_class:
                raise SplitError(
                    f"class {cls} has {pool.size} train samples, "
                    f"needs {spec.shots_per_class}"
                )
            chosen = rng.choice(pool, size=spec.shots_per_class, replace=False)
            shot_idx.append(np.sort(chosen))
        inc_train = train.subset(np.concatenate(shot_idx), split="train")
        cumulative = by_classes(test, spec.classes_through(b), "test")
        incremental.append((inc_train, cumulative))
    return SessionSplits(base_train=base_train, base_test=base_test,
                         incremental=incremental)


def synth_gaussian_dataset(
    n_classes: int,
    per_class: int,
    shape: tuple[int, int, int],
    mean_separation: float,
    noise_sd: float,
    seed: int,
) -> Dataset:
    """Gaussian-cluster stand-in for released activation features.

    Each class gets a non-negative mean map; samples are the mean plus
    isotropic Gaussian noise, clamped elementwise at 0 so the non-negativity
    contract of downstream power transforms holds.  Pure function of its
    arguments.
    """
    if n_classes < 1 or per_class < 1:
        raise InvalidDatasetError("n_classes and per_class must be >= 1")
    if noise_sd <= 0:
        raise InvalidDatasetError("noise_sd must be > 0")
    if mean_separation < 0:
        raise InvalidDatasetError("mean_separation must be >= 0")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    # Class means sit at a common positive baseline plus a class-specific
    # non-negative displacement scaled by mean_separation.
    baseline = 1.0
    means = baseline + mean_separation * rng.uniform(0.0, 1.0, size=(n_classes, c, h, w))
    features = np.empty((n_classes * per_class, c, h, w), dtype=np.float32)
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    for cls in range(n_classes):
        noise = rng.normal(0.0, noise_sd, size=(per_class, c, h, w))
        block = np.maximum(means[cls][None] + noise, 0.0)
        sl = slice(cls * per_class, (cls + 1) * per_class)
        features[sl] = block.astype(np.float32)
        labels[sl] = cls
    return Dataset(features=features, labels=labels, n_classes=n_classes)


def split_train_test(
    dataset: Dataset, train_per_class: int, test_per_class: int
) -> tuple[Dataset, Dataset]:
    """Deterministically split a pool dataset into train/test per class.

    The first ``train_per_class`` samples of each class (in dataset order)
    become train, the next ``test_per_class`` become test.
    """
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for cls in range(dataset.n_classes):
        pool = dataset.class_indices(cls)
        need = train_per_class + test_per_class
        if pool.size < need:
            raise SplitError(
                f"class {cls} has {pool.size} samples, needs {need} for the split"
            )
        train_idx.append(pool[:train_per_class])
        test_idx.append(pool[train_per_class:need])
    train = dataset.subset(np.concatenate(train_idx), split="train")
    test = dataset.subset(np.concatenate(test_idx), split="test")
    return train, test
