"""Supervised contrastive loss, cross-entropy, and the labeled key queue.

The contrastive denominator for a sample is its own key plus the entire
queue — never other keys from the same batch.  Positives are the same-label
members of that set; the own key guarantees the positive set is non-empty.
All log-sum-exp computations subtract the running maximum for stability.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from . import encoder as enc
from .errors import ShapeError

_NORM_TOL = 1e-6


def _check_unit(vec: np.ndarray, name: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if abs(norm - 1.0) > _NORM_TOL:
        raise ValueError(f"{name} must be unit-norm (got norm {norm:.8f})")
    return vec


class KeyQueue:
    """Fixed-capacity FIFO of (unit-norm key, label) pairs.

    Oldest entries are evicted first; every stored key is validated to unit
    norm on entry.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[tuple[np.ndarray, int]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, keys: np.ndarray, labels: np.ndarray) -> "KeyQueue":
        """Append keys in order, evicting oldest entries beyond capacity."""
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if keys.shape[0] != labels.shape[0]:
            raise ShapeError(
                f"{keys.shape[0]} keys vs {labels.shape[0]} labels"
            )
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > _NORM_TOL):
            raise ValueError("queued keys must be unit-norm")
        for vec, lab in zip(keys, labels):
            self._entries.append((vec.copy(), int(lab)))
        return self

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (m, p) keys and (m,) labels, oldest first."""
        if not self._entries:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        keys = np.stack([k for k, _ in self._entries])
        labels = np.array([lab for _, lab in self._entries], dtype=np.int64)
        return keys, labels

    def labels(self) -> list[int]:
        return [lab for _, lab in self._entries]


def queue_push(queue: KeyQueue, keys: np.ndarray, labels: np.ndarray) -> KeyQueue:
    """Functional alias for :meth:`KeyQueue.push`."""
    return queue.push(keys, labels)


def scl_loss(
    q: np.ndarray, k: np.ndarray, label: int, queue: KeyQueue, tau: float
) -> float:
    """Supervised contrastive loss of one (query, key, label) sample.

    -(1/|P|) * sum over positives of log(exp(q.k+/tau) / sum over {k} u Q
    of exp(q.k'/tau)).  Always >= 0; exactly 0 when the positives carry the
    whole denominator mass (e.g. an empty queue).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    q = _check_unit(q, "query")
    k = _check_unit(k, "key")
    q_keys, q_labels = queue.as_arrays()
    sims = [float(q @ k)]
    positives = [sims[0]]
    for vec, lab in zip(q_keys, q_labels):
        s = float(q @ vec)
        sims.append(s)
        if lab == label:
            positives.append(s)
    s_arr = np.array(sims) / tau
    peak = s_arr.max()
    log_z = peak + np.log(np.exp(s_arr - peak).sum())
    pos = np.array(positives) / tau
    return float(log_z - pos.mean())


def ce_loss(logits: np.ndarray, label: int) -> float:
    """Softmax cross-entropy with max-subtraction stability."""
    logits = np.asarray(logits, dtype=np.float64)
    if not (0 <= label < logits.shape[-1]):
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} logits")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


def total_loss(
    params: "enc.EncoderParams",
    batch: "enc.TrainingBatch",
    queue: KeyQueue,
    tau: float,
    disable_scl: bool = False,
) -> tuple[float, dict]:
    """Mean over the batch of CE + SCL, with a per-term breakdown.

    Forwards the query views through the query tower for both heads and the
    key views through the key tower; composes the scalar loss functions above
    so the total is exactly the sum of its reported parts.
    """
    n = batch.views_q.shape[0]
    if n == 0:
        raise ValueError("batch must be non-empty")
    e = enc.embed_batch(params, batch.views_q, which="query")
    logits = enc.classify_logits(params, e)
    ce_terms = [ce_loss(logits[i], int(batch.labels[i])) for i in range(n)]
    scl_terms = [0.0] * n
    if not disable_scl:
        q = enc.project_batch(params, "query", e)
        keys = enc.compute_keys(params, batch.views_k)
        scl_terms = [
            scl_loss(q[i], keys[i], int(batch.labels[i]), queue, tau)
            for i in range(n)
        ]
    ce = float(np.mean(ce_terms))
    scl = float(np.mean(scl_terms))
    return ce + scl, {"total": ce + scl, "ce": ce, "scl": scl}
