"""Binary checkpoints for encoder parameters and fitted classifiers.

Same container style as the feature store: a 4-byte magic (``FSCM``), a u32
version, a u8 kind tag, then shape-tagged float64 tensors in declaration
order.  Classifier checkpoints carry the transform/shrinkage scalars and
per-class statistics (id, sample count, alpha, mean, adapted covariance);
the Cholesky factor is recomputed on load.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .classifiers import ACCClassifier, ClassModel, GaussianizeConfig
from .encoder import EncoderParams, TowerParams, _TOWER_FIELDS
from .errors import FactorizationError, FormatError, TruncatedFileError

MAGIC = b"FSCM"
VERSION = 1
KIND_ENCODER = 1
KIND_CLASSIFIER = 2


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.raw):
            raise TruncatedFileError(f"{self.path}: truncated at offset {self.off}")
        vals = struct.unpack_from(fmt, self.raw, self.off)
        self.off += size
        return vals

    def tensor(self) -> np.ndarray:
        (ndim,) = self.take("<I")
        dims = self.take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        size = 8 * count
        if self.off + size > len(self.raw):
            raise TruncatedFileError(f"{self.path}: truncated tensor payload")
        arr = np.frombuffer(self.raw, dtype="<f8", count=count, offset=self.off)
        self.off += size
        return arr.reshape(dims).copy() if dims else arr.copy().reshape(())


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8", copy=False).tobytes()


def _header(kind: int) -> bytes:
    return struct.pack("<4sIB", MAGIC, VERSION, kind)


def _open(path: str | Path, expect_kind: int) -> _Reader:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < struct.calcsize("<4sIB"):
        raise TruncatedFileError(f"{path}: file shorter than header")
    magic, version, kind = struct.unpack_from("<4sIB", raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if kind != expect_kind:
        raise FormatError(f"{path}: checkpoint kind {kind}, expected {expect_kind}")
    reader = _Reader(raw, str(path))
    reader.off = struct.calcsize("<4sIB")
    return reader


def save_encoder(params: EncoderParams, path: str | Path) -> None:
    chunks = [_header(KIND_ENCODER)]
    for tower in (params.query, params.key):
        for _, arr in tower.arrays():
            chunks.append(_pack_tensor(arr))
    chunks.append(_pack_tensor(params.classifier))
    Path(path).write_bytes(b"".join(chunks))


def load_encoder(path: str | Path) -> EncoderParams:
    reader = _open(path, KIND_ENCODER)
    towers = []
    for _ in range(2):
        towers.append(TowerParams(*(reader.tensor() for _ in _TOWER_FIELDS)))
    classifier = reader.tensor()
    return EncoderParams(query=towers[0], key=towers[1], classifier=classifier)


_ALPHA_MODES = ("sum", "mean")


def save_classifier(clf: ACCClassifier, path: str | Path) -> None:
    chunks = [_header(KIND_CLASSIFIER)]
    chunks.append(struct.pack("<B", _ALPHA_MODES.index(clf.alpha_mode)))
    chunks.append(struct.pack("<dddI", clf.cfg.lam, clf.cfg.eps, clf.k, len(clf.models)))
    for cls in clf.class_ids:
        model = clf.models[cls]
        chunks.append(struct.pack("<IQd", cls, model.n, model.alpha))
        chunks.append(_pack_tensor(model.mu))
        chunks.append(_pack_tensor(model.sigma_a))
    Path(path).write_bytes(b"".join(chunks))


def load_classifier(path: str | Path) -> ACCClassifier:
    reader = _open(path, KIND_CLASSIFIER)
    (mode_tag,) = reader.take("<B")
    if mode_tag >= len(_ALPHA_MODES):
        raise FormatError(f"{path}: unknown alpha mode tag {mode_tag}")
    lam, eps, k, count = reader.take("<dddI")
    clf = ACCClassifier(
        cfg=GaussianizeConfig(lam=lam, eps=eps), k=k, alpha_mode=_ALPHA_MODES[mode_tag]
    )
    for _ in range(count):
        cls, n, alpha = reader.take("<IQd")
        mu = reader.tensor()
        sigma_a = reader.tensor()
        try:
            chol = np.linalg.cholesky(sigma_a)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(
                f"{path}: stored covariance for class {cls} not positive definite"
            ) from exc
        clf.models[int(cls)] = ClassModel(
            class_id=int(cls), mu=mu, sigma=None, alpha=alpha,
            sigma_a=sigma_a, chol_lower=chol, n=int(n),
        )
    return clf
