"""Trainable query encoder, momentum key copy, and optimizer.

The encoder is deliberately small so exact gradients stay testable: global
average pool over the spatial grid, two fully-connected layers with ReLU
(the second ReLU makes embeddings non-negative, which the downstream power
transform relies on), a projection head normalized to the unit sphere for
contrastive training, and a linear classification head on the raw embedding.

Gradients are computed analytically here — no autodiff framework — and are
checked against finite differences in the test suite.  The key-side tower
receives no gradients; it only moves through :func:`momentum_update`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from .errors import NonFiniteError, ShapeError, ZeroVectorError

if TYPE_CHECKING:  # pragma: no cover - avoids a circular import with losses
    from .losses import KeyQueue

_TOWER_FIELDS = ("w1", "b1", "w2", "b2", "wp", "bp")


@dataclass
class TowerParams:
    """One encoder+projection tower (query or key side)."""

    w1: np.ndarray  # (hidden, C)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (d, hidden)
    b2: np.ndarray  # (d,)
    wp: np.ndarray  # (p, d)
    bp: np.ndarray  # (p,)

    def copy(self) -> "TowerParams":
        return TowerParams(*(getattr(self, f).copy() for f in _TOWER_FIELDS))

    def zeros_like(self) -> "TowerParams":
        return TowerParams(*(np.zeros_like(getattr(self, f)) for f in _TOWER_FIELDS))

    def arrays(self):
        return [(f, getattr(self, f)) for f in _TOWER_FIELDS]


@dataclass
class EncoderParams:
    """Query tower, its momentum key copy, and the linear head."""

    query: TowerParams
    key: TowerParams
    classifier: np.ndarray  # (d, n_head): logits are classifier.T @ embedding

    @property
    def input_channels(self) -> int:
        return self.query.w1.shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.query.w2.shape[0]

    @property
    def projection_dim(self) -> int:
        return self.query.wp.shape[0]

    @property
    def n_head(self) -> int:
        return self.classifier.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.query.copy(), self.key.copy(), self.classifier.copy())


@dataclass
class EncoderGrads:
    """Gradient tree mirroring :class:`EncoderParams`.

    ``key`` is always zero: the key tower is excluded from optimization by
    construction (stop-gradient).
    """

    query: TowerParams
    key: TowerParams
    classifier: np.ndarray


@dataclass
class OptimizerState:
    """Classic momentum SGD state over the query tower and linear head."""

    velocity_query: TowerParams
    velocity_classifier: np.ndarray
    momentum: float = 0.9
    base_lr: float = 0.1
    epoch: int = 0
    total_epochs: int = 1


@dataclass
class TrainingBatch:
    """Augmented view pairs plus head-index labels for one update step."""

    views_q: np.ndarray  # (n, C, H, W)
    views_k: np.ndarray  # (n, C, H, W)
    labels: np.ndarray  # (n,) indices into the classifier head


def init_encoder(
    in_channels: int,
    hidden_dim: int,
    embedding_dim: int,
    projection_dim: int,
    n_head: int,
    seed: int,
) -> EncoderParams:
    """Seeded uniform fan-in initialization; key tower starts equal to query."""
    rng = np.random.default_rng(seed)

    def fan_in_uniform(out_dim: int, in_dim: int) -> np.ndarray:
        limit = 1.0 / math.sqrt(in_dim)
        return rng.uniform(-limit, limit, size=(out_dim, in_dim))

    def bias(out_dim: int, in_dim: int) -> np.ndarray:
        limit = 1.0 / math.sqrt(in_dim)
        return rng.uniform(-limit, limit, size=out_dim)

    query = TowerParams(
        w1=fan_in_uniform(hidden_dim, in_channels),
        b1=bias(hidden_dim, in_channels),
        w2=fan_in_uniform(embedding_dim, hidden_dim),
        b2=bias(embedding_dim, hidden_dim),
        wp=fan_in_uniform(projection_dim, embedding_dim),
        bp=bias(projection_dim, embedding_dim),
    )
    classifier = fan_in_uniform(n_head, embedding_dim).T  # (d, n_head), fan-in d
    return EncoderParams(query=query, key=query.copy(), classifier=classifier)


def init_optimizer(
    params: EncoderParams, momentum: float, base_lr: float, total_epochs: int
) -> OptimizerState:
    return OptimizerState(
        velocity_query=params.query.zeros_like(),
        velocity_classifier=np.zeros_like(params.classifier),
        momentum=momentum,
        base_lr=base_lr,
        epoch=0,
        total_epochs=max(total_epochs, 1),
    )


def _tower(params: EncoderParams, which: str) -> TowerParams:
    if which == "query":
        return params.query
    if which == "key":
        return params.key
    raise ValueError(f"which must be 'query' or 'key', got {which!r}")


def global_average_pool(fms: np.ndarray) -> np.ndarray:
    """(…, C, H, W) -> (…, C) mean over the spatial grid, in float64."""
    return fms.astype(np.float64).mean(axis=(-2, -1))


def embed_batch(params: EncoderParams, fms: np.ndarray, which: str = "query") -> np.ndarray:
    """Forward (n, C, H, W) feature maps to (n, d) embeddings."""
    tower = _tower(params, which)
    if fms.ndim != 4 or fms.shape[1] != tower.w1.shape[1]:
        raise ShapeError(
            f"expected (n, {tower.w1.shape[1]}, H, W) input, got {fms.shape}"
        )
    x = global_average_pool(fms)
    h1 = np.maximum(x @ tower.w1.T + tower.b1, 0.0)
    return np.maximum(h1 @ tower.w2.T + tower.b2, 0.0)


def embed(params: EncoderParams, fm: np.ndarray, which: str = "query") -> np.ndarray:
    """Forward a single (C, H, W) feature map to a d-vector embedding."""
    if fm.ndim != 3:
        raise ShapeError(f"expected (C, H, W) input, got {fm.shape}")
    return embed_batch(params, fm[None], which)[0]


def project_batch(params: EncoderParams, which: str, embeddings: np.ndarray) -> np.ndarray:
    """(n, d) embeddings -> (n, p) unit-norm contrastive vectors."""
    tower = _tower(params, which)
    u = embeddings @ tower.wp.T + tower.bp
    norms = np.linalg.norm(u, axis=-1)
    if np.any(norms < 1e-12):
        raise ZeroVectorError(
            f"{which} projection produced a zero vector (min norm {norms.min():.3e})"
        )
    return u / norms[:, None]


def project(params: EncoderParams, which: str, embedding: np.ndarray) -> np.ndarray:
    return project_batch(params, which, embedding[None])[0]


def classify_logits(params: EncoderParams, embedding: np.ndarray) -> np.ndarray:
    """Linear head on the raw (un-normalized) embedding: classifier.T @ e."""
    return embedding @ params.classifier


def cosine_lr(epoch: int, total: int, base_lr: float) -> float:
    """Cosine annealing: 0.5 * base_lr * (1 + cos(pi * epoch / total))."""
    if total < 1 or not (0 <= epoch <= total):
        raise ValueError(f"need 0 <= epoch <= total and total >= 1, got {epoch}/{total}")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total))


def sgd_step(
    params: EncoderParams, grads: EncoderGrads, state: OptimizerState
) -> tuple[EncoderParams, OptimizerState]:
    """v <- momentum*v + g; theta <- theta - lr*v (classic momentum, in place)."""
    lr = cosine_lr(state.epoch, state.total_epochs, state.base_lr)
    for name, _ in params.query.arrays():
        v = getattr(state.velocity_query, name)
        v *= state.momentum
        v += getattr(grads.query, name)
        getattr(params.query, name)[...] -= lr * v
    state.velocity_classifier *= state.momentum
    state.velocity_classifier += grads.classifier
    params.classifier -= lr * state.velocity_classifier
    return params, state


def momentum_update(params: EncoderParams, m: float) -> EncoderParams:
    """key <- m*key + (1-m)*query, elementwise exact."""
    if not (0.0 <= m <= 1.0):
        raise ValueError(f"momentum coefficient must lie in [0, 1], got {m}")
    for name, _ in params.key.arrays():
        k = getattr(params.key, name)
        k[...] = m * k + (1.0 - m) * getattr(params.query, name)
    return params


def _check_finite(arr: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {layer}")


def compute_keys(params: EncoderParams, views_k: np.ndarray) -> np.ndarray:
    """Key-tower forward of the key views: (n, p) unit-norm, no gradients."""
    ek = embed_batch(params, views_k, which="key")
    return project_batch(params, "key", ek)


def loss_and_grads(
    params: EncoderParams,
    batch: TrainingBatch,
    queue: KeyQueue,
    tau: float,
    disable_scl: bool = False,
) -> tuple[float, dict, EncoderGrads]:
    """Total loss (mean CE + supervised-contrastive) and exact gradients.

    Only query-side parameters and the linear head get gradients; keys come
    from the key tower and the queue and are treated as constants.  Returns
    (total, per-term breakdown, gradient tree).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = batch.views_q.shape[0]
    if n == 0:
        raise ValueError("batch must be non-empty")
    labels = np.asarray(batch.labels, dtype=np.int64)
    tq = params.query

    # ---- query-side forward with caches ----
    x = global_average_pool(batch.views_q)  # (n, C)
    z1 = x @ tq.w1.T + tq.b1
    _check_finite(z1, "fc1")
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ tq.w2.T + tq.b2
    _check_finite(z2, "fc2")
    e = np.maximum(z2, 0.0)  # (n, d)

    # ---- cross-entropy head ----
    logits = e @ params.classifier  # (n, n_head)
    _check_finite(logits, "classifier")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    probs = expl / expl.sum(axis=1, keepdims=True)
    ce_terms = np.log(expl.sum(axis=1)) - shifted[np.arange(n), labels]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    grad_classifier = e.T @ dlogits / n
    de = dlogits @ params.classifier.T  # accumulates CE path first

    grads = EncoderGrads(
        query=tq.zeros_like(), key=params.key.zeros_like(),
        classifier=grad_classifier,
    )

    # ---- supervised contrastive head ----
    scl_terms = np.zeros(n)
    if not disable_scl:
        u = e @ tq.wp.T + tq.bp  # (n, p)
        _check_finite(u, "projection")
        norms = np.linalg.norm(u, axis=1)
        if np.any(norms < 1e-12):
            raise ZeroVectorError("projection produced a zero vector during training")
        q = u / norms[:, None]
        keys = compute_keys(params, batch.views_k)  # (n, p), constants
        q_keys, q_labels = queue.as_arrays()
        m = q_keys.shape[0]

        # denominator per sample: its own key followed by the whole queue
        own_sim = np.einsum("ij,ij->i", q, keys)[:, None] / tau  # (n, 1)
        if m:
            sims = np.concatenate([own_sim, (q @ q_keys.T) / tau], axis=1)
            pos_mask = np.concatenate(
                [np.ones((n, 1), dtype=bool), labels[:, None] == q_labels[None, :]],
                axis=1,
            )
        else:
            sims = own_sim
            pos_mask = np.ones((n, 1), dtype=bool)
        peak = sims.max(axis=1, keepdims=True)
        exps = np.exp(sims - peak)
        z = exps.sum(axis=1)
        log_z = np.log(z) + peak[:, 0]
        softmax = exps / z[:, None]

        pos_count = pos_mask.sum(axis=1)
        pos_sim_sum = np.where(pos_mask, sims, 0.0).sum(axis=1)
        scl_terms = log_z - pos_sim_sum / pos_count

        # dL_i/dq_i = (1/tau) * (sum_j softmax_ij k_j - mean over positives of k_j)
        weights = (softmax - pos_mask / pos_count[:, None]) / tau
        dq = weights[:, :1] * keys
        if m:
            dq = dq + weights[:, 1:] @ q_keys
        du = (dq - q * np.einsum("ij,ij->i", q, dq)[:, None]) / norms[:, None]
        grads.query.wp += du.T @ e / n
        grads.query.bp += du.sum(axis=0) / n
        de = de + du @ tq.wp

    # ---- shared backbone backward ----
    dz2 = de * (z2 > 0)
    grads.query.w2 += dz2.T @ h1 / n
    grads.query.b2 += dz2.sum(axis=0) / n
    dh1 = dz2 @ tq.w2
    dz1 = dh1 * (z1 > 0)
    grads.query.w1 += dz1.T @ x / n
    grads.query.b1 += dz1.sum(axis=0) / n

    ce = float(ce_terms.mean())
    scl = float(scl_terms.mean())
    total = ce + scl
    if not math.isfinite(total):
        raise NonFiniteError("non-finite total loss")
    return total, {"total": total, "ce": ce, "scl": scl}, grads


def grow_classifier(params: EncoderParams, n_new: int, rng: np.random.Generator) -> EncoderParams:
    """Append seeded fan-in-initialized columns to the linear head."""
    d = params.embedding_dim
    limit = 1.0 / math.sqrt(d)
    extra = rng.uniform(-limit, limit, size=(d, n_new))
    return replace(params, classifier=np.concatenate([params.classifier, extra], axis=1))
