"""Adaptive-covariance Mahalanobis classifier and the NCM baseline.

Embeddings are Gaussianized with an elementwise power transform, then each
class stores the mean and a shrunk, correlation-normalized covariance.  The
shrinkage intensity scales with the class's own scatter, so tight classes
keep sharp boundaries while diffuse few-shot classes get wider ones.  With
few shots the sample covariance is rank-deficient; the shrinkage terms make
the adapted matrix positive definite, and distances are evaluated through a
Cholesky factorization with triangular solves — never an explicit inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import encoder as enc
from .errors import DegenerateClassError, FactorizationError, ShapeError


@dataclass
class GaussianizeConfig:
    """Power-transform exponent and the positive clamp applied before it."""

    lam: float = 0.2
    eps: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be > 0")


def gaussianize(x: np.ndarray, cfg: GaussianizeConfig) -> np.ndarray:
    """Elementwise (x^lam - 1)/lam, or log(x) at lam = 0.

    Inputs are clamped at cfg.eps first; rectified embeddings contain exact
    zeros and both branches are undefined there.
    """
    x = np.maximum(np.asarray(x, dtype=np.float64), cfg.eps)
    if cfg.lam == 0.0:
        return np.log(x)
    return (np.power(x, cfg.lam) - 1.0) / cfg.lam


def adaptive_alpha(deviations: np.ndarray, k: float, mode: str = "sum") -> float:
    """Scalar shrinkage intensity from (n, d) deviations around the class mean.

    The squared per-sample deviation is a vector; collapsing it to the scalar
    alpha admits two conventions, isolated here so they can be A/B tested:

    - "sum": k * mean over samples of the squared deviation norm (sum over
      dimensions).  Scales like k*d*sigma1, which keeps the diagonal boost
      ahead of the accumulated off-diagonal term for any embedding width;
      the default.
    - "mean": k * mean over samples and dimensions, i.e. k*sigma1.  Scale-
      matched to sigma1 but loses positive definiteness whenever the
      off-diagonal mean times (d-1) outruns k*sigma1^2, which happens in
      practice for tight few-shot classes.
    """
    deviations = np.atleast_2d(deviations)
    if mode == "sum":
        return float(k * np.mean(np.sum(deviations**2, axis=1)))
    if mode == "mean":
        return float(k * np.mean(deviations**2))
    raise ValueError(f"alpha mode must be 'sum' or 'mean', got {mode!r}")


def shrink_normalize(sigma: np.ndarray, alpha: float) -> np.ndarray:
    """Shrink a covariance toward scaled diagonal/off-diagonal means, then
    normalize to unit diagonal.

    sigma1 = mean of diagonal entries, sigma2 = mean of off-diagonal entries
    (0 when d = 1); S = sigma + alpha*sigma1*I + sigma2*(1 - I); the result is
    S[i, j] / sqrt(S[i, i] * S[j, j]).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    d = sigma.shape[0]
    if sigma.shape != (d, d):
        raise ShapeError(f"covariance must be square, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise ShapeError("covariance must be symmetric")
    sigma1 = float(np.trace(sigma)) / d
    sigma2 = float(sigma.sum() - np.trace(sigma)) / (d * (d - 1)) if d > 1 else 0.0
    s = sigma + alpha * sigma1 * np.eye(d) + sigma2 * (1.0 - np.eye(d))
    diag = np.diag(s)
    if np.any(diag <= 0):
        raise DegenerateClassError(
            "shrunk covariance has a non-positive diagonal "
            "(zero scatter and zero shrinkage)"
        )
    scale = np.sqrt(diag)
    return s / np.outer(scale, scale)


@dataclass
class ClassModel:
    """Per-class statistics: mean, raw covariance, adapted covariance, and
    the Cholesky factor used for distance evaluation.

    ``sigma`` is None for models restored from a checkpoint, which stores
    only what prediction needs.
    """

    class_id: int
    mu: np.ndarray
    sigma: np.ndarray | None
    alpha: float
    sigma_a: np.ndarray
    chol_lower: np.ndarray
    n: int


def fit_class(
    embeddings: np.ndarray,
    cfg: GaussianizeConfig,
    k: float,
    class_id: int = 0,
    fixed_alpha: float | None = None,
    alpha_mode: str = "sum",
) -> ClassModel:
    """Fit one class from raw (pre-transform) embeddings.

    Statistics use the population (1/n) convention on Gaussianized vectors.
    alpha comes from :func:`adaptive_alpha` on the deviations, unless
    ``fixed_alpha`` pins it (the non-adaptive ablation).  A class whose
    samples coincide has no usable covariance and is rejected rather than
    silently regularized.
    """
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n, d = embeddings.shape
    if n < 1:
        raise DegenerateClassError(f"class {class_id}: no embeddings")
    g = gaussianize(embeddings, cfg)
    mu = g.mean(axis=0)
    diffs = g - mu
    sigma = diffs.T @ diffs / n
    scatter = float(np.mean(diffs**2))
    alpha = adaptive_alpha(diffs, k, alpha_mode) if fixed_alpha is None else float(fixed_alpha)
    if scatter == 0.0 and alpha == 0.0:
        raise DegenerateClassError(
            f"class {class_id}: all {n} embeddings identical, covariance is zero"
        )
    sigma_a = shrink_normalize(sigma, alpha)
    try:
        chol = np.linalg.cholesky(sigma_a)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"class {class_id}: adapted covariance not positive definite"
        ) from exc
    return ClassModel(
        class_id=class_id, mu=mu, sigma=sigma, alpha=alpha,
        sigma_a=sigma_a, chol_lower=chol, n=n,
    )


def mahalanobis(g: np.ndarray, model: ClassModel) -> float:
    """sqrt((g - mu)^T Sigma_a^{-1} (g - mu)) via a triangular solve."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != model.mu.shape:
        raise ShapeError(f"vector shape {g.shape} vs mean {model.mu.shape}")
    z = solve_triangular(model.chol_lower, g - model.mu, lower=True)
    return float(np.linalg.norm(z))


@dataclass
class ACCClassifier:
    """Mahalanobis decision rule over per-class adapted covariances.

    Ties in the distance argmin break toward the smallest class id, so
    predictions are reproducible.
    """

    cfg: GaussianizeConfig
    k: float
    alpha_mode: str = "sum"
    models: dict[int, ClassModel] = field(default_factory=dict)

    def __post_init__(self):
        if self.k <= 1:
            raise ValueError(f"scaling factor k must be > 1, got {self.k}")

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.models)

    def fit_class(
        self,
        class_id: int,
        embeddings: np.ndarray,
        fixed_alpha: float | None = None,
    ) -> ClassModel:
        model = fit_class(
            embeddings, self.cfg, self.k, class_id, fixed_alpha, self.alpha_mode
        )
        self.models[class_id] = model
        return model

    def distances(self, raw_embedding: np.ndarray) -> tuple[list[int], np.ndarray]:
        """Mahalanobis distance from one raw embedding to every class."""
        if not self.models:
            raise DegenerateClassError("classifier has no fitted classes")
        g = gaussianize(raw_embedding, self.cfg)
        ids = self.class_ids
        return ids, np.array([mahalanobis(g, self.models[c]) for c in ids])

    def predict_embedding(self, raw_embedding: np.ndarray) -> int:
        ids, dists = self.distances(raw_embedding)
        return ids[int(np.argmin(dists))]

    def predict_embeddings(self, raw_embeddings: np.ndarray) -> np.ndarray:
        """Vectorized argmin prediction for an (n, d) block of embeddings."""
        if not self.models:
            raise DegenerateClassError("classifier has no fitted classes")
        g = gaussianize(raw_embeddings, self.cfg)
        ids = self.class_ids
        dists = np.empty((len(ids), g.shape[0]))
        for row, cls in enumerate(ids):
            model = self.models[cls]
            z = solve_triangular(model.chol_lower, (g - model.mu).T, lower=True)
            dists[row] = np.linalg.norm(z, axis=0)
        return np.array(ids, dtype=np.int64)[np.argmin(dists, axis=0)]


def predict(
    fm: np.ndarray, params: "enc.EncoderParams", classifier: ACCClassifier
) -> tuple[int, dict[int, float]]:
    """Classify one feature map: embed, Gaussianize, nearest class by
    Mahalanobis distance.  Returns (class id, distance per class)."""
    e = enc.embed(params, fm)
    ids, dists = classifier.distances(e)
    best = ids[int(np.argmin(dists))]
    return best, dict(zip(ids, dists.tolist()))


@dataclass
class NCMClassifier:
    """Nearest-class-mean on raw embeddings (Euclidean); the no-covariance
    ablation classifier.  Ties break toward the smallest class id."""

    means: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.means)

    def fit_class(self, class_id: int, embeddings: np.ndarray) -> None:
        embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if embeddings.shape[0] < 1:
            raise DegenerateClassError(f"class {class_id}: no embeddings")
        self.means[class_id] = embeddings.mean(axis=0)

    def predict_embedding(self, raw_embedding: np.ndarray) -> int:
        ids = self.class_ids
        if not ids:
            raise DegenerateClassError("classifier has no fitted classes")
        dists = [np.linalg.norm(raw_embedding - self.means[c]) for c in ids]
        return ids[int(np.argmin(dists))]

    def predict_embeddings(self, raw_embeddings: np.ndarray) -> np.ndarray:
        ids = self.class_ids
        if not ids:
            raise DegenerateClassError("classifier has no fitted classes")
        mean_mat = np.stack([self.means[c] for c in ids])
        d2 = (
            np.sum(raw_embeddings**2, axis=1)[:, None]
            - 2.0 * raw_embeddings @ mean_mat.T
            + np.sum(mean_mat**2, axis=1)[None, :]
        )
        return np.array(ids, dtype=np.int64)[np.argmin(d2, axis=1)]


def ncm_fit_predict(
    embeddings_per_class: dict[int, np.ndarray], query: np.ndarray
) -> int:
    """One-shot NCM: fit class means and classify a single query embedding."""
    clf = NCMClassifier()
    for cls, emb in embeddings_per_class.items():
        clf.fit_class(cls, emb)
    return clf.predict_embedding(np.asarray(query, dtype=np.float64))
