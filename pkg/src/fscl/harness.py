"""Protocol orchestration: base training, incremental sessions, baselines.

The base phase optimizes the combined cross-entropy + supervised-contrastive
objective over augmented view pairs.  Incremental phases freeze the encoder
and only fit per-class statistics from the K shots; evaluation is cumulative
top-1 over every class seen so far.  The naive fine-tuning baseline instead
keeps training the encoder on each session's shots and exhibits catastrophic
forgetting.

Reports are deterministic functions of the experiment config (seed
included); wall-clock timings are collected separately so report files stay
byte-identical across reruns.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .augment import sample_view_pair
from .classifiers import ACCClassifier, GaussianizeConfig, NCMClassifier
from .config import ExperimentConfig
from .errors import ConfigError, NonFiniteError, SplitError, TrainingDivergedError
from .feature_store import (
    Dataset,
    SessionSplits,
    make_session_splits,
    split_train_test,
    synth_gaussian_dataset,
)
from .losses import KeyQueue

# fixed purpose tags for deterministic rng derivation from the experiment seed
_RNG_INIT, _RNG_AUG, _RNG_SHUFFLE, _RNG_HEAD = 0, 1, 2, 3


def _rng(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, purpose)))


@dataclass
class BaseMetrics:
    """Loss curves and closing train accuracy of the base phase."""

    epochs: int
    loss_total: list[float] = field(default_factory=list)
    loss_ce: list[float] = field(default_factory=list)
    loss_scl: list[float] = field(default_factory=list)
    final_train_accuracy: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "loss_total": self.loss_total,
            "loss_ce": self.loss_ce,
            "loss_scl": self.loss_scl,
            "final_train_accuracy": self.final_train_accuracy,
        }


@dataclass
class SessionResult:
    session: int
    new_classes: list[int]
    cumulative_classes: list[int]
    n_test: int
    cumulative_accuracy: float
    per_class_accuracy: dict[int, float]
    linear_head_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "session": self.session,
            "new_classes": self.new_classes,
            "cumulative_classes": self.cumulative_classes,
            "n_test": self.n_test,
            "cumulative_accuracy": self.cumulative_accuracy,
            "per_class_accuracy": {
                str(c): a for c, a in sorted(self.per_class_accuracy.items())
            },
            "linear_head_accuracy": self.linear_head_accuracy,
        }


@dataclass
class SessionReport:
    method: str
    variant: str
    seed: int
    sessions: list[SessionResult]
    base_training: BaseMetrics

    @property
    def final_accuracy(self) -> float:
        return self.sessions[-1].cumulative_accuracy

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "variant": self.variant,
            "seed": self.seed,
            "n_sessions": len(self.sessions),
            "final_accuracy": self.final_accuracy,
            "sessions": [s.to_dict() for s in self.sessions],
            "base_training": self.base_training.to_dict(),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["session", "n_test", "cumulative_accuracy"])
        for s in self.sessions:
            writer.writerow([s.session, s.n_test, f"{s.cumulative_accuracy:.6f}"])
        return buf.getvalue()


def canonical_json(obj) -> str:
    """Stable JSON serialization: sorted keys, fixed layout, one trailing
    newline.  Byte-identical for equal inputs."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def resolve_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Materialize (train, test) datasets from files or the synthetic recipe."""
    ds = config.dataset
    if ds.synthetic is not None:
        spec = ds.synthetic
        pool = synth_gaussian_dataset(
            n_classes=spec.n_classes,
            per_class=spec.train_per_class + spec.test_per_class,
            shape=tuple(spec.shape),
            mean_separation=spec.mean_separation,
            noise_sd=spec.noise_sd,
            seed=spec.seed,
        )
        return split_train_test(pool, spec.train_per_class, spec.test_per_class)
    from .feature_store import load_feature_store

    return (
        load_feature_store(ds.train_path, split="train"),
        load_feature_store(ds.test_path, split="test"),
    )


def _head_order(classes: list[int]) -> list[int]:
    """Classifier-head column order for a class-id list (sorted, stable)."""
    return sorted(classes)


def train_base(
    config: ExperimentConfig, base_train: Dataset
) -> tuple[enc.EncoderParams, BaseMetrics, KeyQueue]:
    """Optimize the encoder on the base session.

    Per step: draw a view pair per sample, forward both views, combine the
    losses, backpropagate, take a momentum-SGD step at the cosine-annealed
    rate, then refresh the key tower and push the step's keys into the queue.
    Deterministic given config.seed.
    """
    head = _head_order(config.session_spec.base_classes)
    head_index = {cls: i for i, cls in enumerate(head)}
    if not all(int(lab) in head_index for lab in np.unique(base_train.labels)):
        raise ConfigError("base train set contains classes outside the base list")

    c = base_train.shape[0]
    params = enc.init_encoder(
        in_channels=c,
        hidden_dim=config.encoder.hidden_dim,
        embedding_dim=config.encoder.embedding_dim,
        projection_dim=config.encoder.projection_dim,
        n_head=len(head),
        seed=int(_rng(config.seed, _RNG_INIT).integers(2**31)),
    )
    state = enc.init_optimizer(
        params,
        momentum=config.optimizer.momentum,
        base_lr=config.optimizer.base_lr,
        total_epochs=config.optimizer.epochs,
    )
    queue = KeyQueue(config.contrastive.queue_capacity)
    policy = config.augment.to_policy()
    rng_aug = _rng(config.seed, _RNG_AUG)
    rng_shuffle = _rng(config.seed, _RNG_SHUFFLE)
    disable_scl = config.ablation.disable_scl

    labels_head = np.array([head_index[int(lab)] for lab in base_train.labels])
    metrics = BaseMetrics(epochs=config.optimizer.epochs)
    n = len(base_train)
    bs = config.optimizer.batch_size

    for epoch in range(config.optimizer.epochs):
        state.epoch = epoch
        order = rng_shuffle.permutation(n)
        sums = np.zeros(3)
        for batch_no, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            views_q = np.empty((idx.size, *base_train.shape), dtype=np.float32)
            views_k = np.empty_like(views_q)
            for row, i in enumerate(idx):
                views_q[row], views_k[row] = sample_view_pair(
                    base_train.features[i], policy, rng_aug
                )
            batch = enc.TrainingBatch(
                views_q=views_q, views_k=views_k, labels=labels_head[idx]
            )
            try:
                total, parts, grads = enc.loss_and_grads(
                    params, batch, queue, config.contrastive.temperature,
                    disable_scl=disable_scl,
                )
            except NonFiniteError as exc:
                raise TrainingDivergedError(str(exc), epoch=epoch, batch=batch_no) from exc
            enc.sgd_step(params, grads, state)
            if not disable_scl:
                keys = enc.compute_keys(params, views_k)
                enc.momentum_update(params, config.contrastive.key_momentum)
                queue.push(keys, labels_head[idx])
            sums += np.array([total, parts["ce"], parts["scl"]]) * idx.size
        metrics.loss_total.append(float(sums[0] / n))
        metrics.loss_ce.append(float(sums[1] / n))
        metrics.loss_scl.append(float(sums[2] / n))

    embeddings = enc.embed_batch(params, base_train.features)
    preds = np.argmax(enc.classify_logits(params, embeddings), axis=1)
    metrics.final_train_accuracy = float(np.mean(preds == labels_head)) if n else 0.0
    return params, metrics, queue


def evaluate_top1(predict_fn, dataset: Dataset) -> tuple[float, dict[int, float]]:
    """Top-1 accuracy of a batch predictor plus a per-class breakdown."""
    if len(dataset) == 0:
        raise SplitError("cannot evaluate on an empty test set")
    preds = np.asarray(predict_fn(dataset.features))
    correct = preds == dataset.labels
    per_class = {
        int(cls): float(correct[dataset.labels == cls].mean())
        for cls in np.unique(dataset.labels)
    }
    return float(correct.mean()), per_class


def _fit_classifier_classes(
    classifier, params: enc.EncoderParams, dataset: Dataset,
    classes: list[int], fixed_alpha: float | None,
) -> None:
    for cls in classes:
        idx = dataset.class_indices(cls)
        embeddings = enc.embed_batch(params, dataset.features[idx])
        if isinstance(classifier, ACCClassifier):
            classifier.fit_class(cls, embeddings, fixed_alpha=fixed_alpha)
        else:
            classifier.fit_class(cls, embeddings)


def build_base_classifier(
    params: enc.EncoderParams, base_train: Dataset, config: ExperimentConfig
):
    """Fit the frozen-extractor classifier on all base training samples."""
    if config.uses_cov_classifier:
        clf = ACCClassifier(
            cfg=GaussianizeConfig(
                lam=config.cov_classifier.box_cox_lambda,
                eps=config.cov_classifier.clamp_eps,
            ),
            k=config.cov_classifier.scaling_k,
            alpha_mode=config.cov_classifier.alpha_mode,
        )
    else:
        clf = NCMClassifier()
    _fit_classifier_classes(
        clf, params, base_train,
        _head_order(config.session_spec.base_classes),
        config.ablation.fixed_alpha,
    )
    return clf


def _classifier_predict_fn(params: enc.EncoderParams, classifier):
    def predict(features: np.ndarray) -> np.ndarray:
        return classifier.predict_embeddings(enc.embed_batch(params, features))

    return predict


def _head_predict_fn(params: enc.EncoderParams, head: list[int]):
    ids = np.array(head, dtype=np.int64)

    def predict(features: np.ndarray) -> np.ndarray:
        logits = enc.classify_logits(params, enc.embed_batch(params, features))
        return ids[np.argmax(logits, axis=1)]

    return predict


def run_incremental(
    params: enc.EncoderParams,
    classifier,
    splits: SessionSplits,
    config: ExperimentConfig,
) -> tuple[SessionReport, object]:
    """Frozen-extractor protocol: fit new per-class statistics each session,
    evaluate cumulative top-1 after every session (base session included)."""
    spec = config.session_spec
    predict = _classifier_predict_fn(params, classifier)
    head_acc, _ = evaluate_top1(
        _head_predict_fn(params, _head_order(spec.base_classes)), splits.base_test
    )
    acc, per_class = evaluate_top1(predict, splits.base_test)
    sessions = [
        SessionResult(
            session=0,
            new_classes=sorted(spec.base_classes),
            cumulative_classes=sorted(spec.base_classes),
            n_test=len(splits.base_test),
            cumulative_accuracy=acc,
            per_class_accuracy=per_class,
            linear_head_accuracy=head_acc,
        )
    ]
    for b, (inc_train, cum_test) in enumerate(splits.incremental, start=1):
        new_classes = sorted(spec.sessions[b - 1])
        _fit_classifier_classes(
            classifier, params, inc_train, new_classes, config.ablation.fixed_alpha
        )
        acc, per_class = evaluate_top1(predict, cum_test)
        sessions.append(
            SessionResult(
                session=b,
                new_classes=new_classes,
                cumulative_classes=sorted(
                    sessions[-1].cumulative_classes + new_classes
                ),
                n_test=len(cum_test),
                cumulative_accuracy=acc,
                per_class_accuracy=per_class,
            )
        )
    report = SessionReport(
        method=config.method,
        variant=config.variant_label(),
        seed=config.seed,
        sessions=sessions,
        base_training=BaseMetrics(epochs=0),
    )
    return report, classifier


def finetune_baseline(
    config: ExperimentConfig, splits: SessionSplits
) -> tuple[SessionReport, enc.EncoderParams, BaseMetrics]:
    """No continual-learning safeguards: after the base phase, keep fine-tuning
    the encoder and a growing linear head on each session's shots only."""
    base_cfg = config.model_copy(deep=True)
    base_cfg.ablation.disable_scl = True
    params, metrics, _ = train_base(base_cfg, splits.base_train)

    head = _head_order(config.session_spec.base_classes)
    rng_head = _rng(config.seed, _RNG_HEAD)
    acc, per_class = evaluate_top1(_head_predict_fn(params, head), splits.base_test)
    sessions = [
        SessionResult(
            session=0,
            new_classes=sorted(head),
            cumulative_classes=sorted(head),
            n_test=len(splits.base_test),
            cumulative_accuracy=acc,
            per_class_accuracy=per_class,
            linear_head_accuracy=acc,
        )
    ]
    for b, (inc_train, cum_test) in enumerate(splits.incremental, start=1):
        new_classes = sorted(config.session_spec.sessions[b - 1])
        params = enc.grow_classifier(params, len(new_classes), rng_head)
        head = head + new_classes
        head_index = {cls: i for i, cls in enumerate(head)}
        labels_head = np.array([head_index[int(lab)] for lab in inc_train.labels])

        state = enc.init_optimizer(
            params,
            momentum=config.optimizer.momentum,
            base_lr=config.finetune.lr,
            total_epochs=config.finetune.epochs,
        )
        raw = inc_train.features
        batch = enc.TrainingBatch(views_q=raw, views_k=raw, labels=labels_head)
        for epoch in range(config.finetune.epochs):
            state.epoch = epoch
            try:
                _, _, grads = enc.loss_and_grads(
                    params, batch, KeyQueue(1), tau=1.0, disable_scl=True
                )
            except NonFiniteError as exc:
                raise TrainingDivergedError(str(exc), epoch=epoch, batch=0) from exc
            enc.sgd_step(params, grads, state)

        acc, per_class = evaluate_top1(_head_predict_fn(params, head), cum_test)
        sessions.append(
            SessionResult(
                session=b,
                new_classes=new_classes,
                cumulative_classes=sorted(head),
                n_test=len(cum_test),
                cumulative_accuracy=acc,
                per_class_accuracy=per_class,
            )
        )
    report = SessionReport(
        method="finetune",
        variant="finetune",
        seed=config.seed,
        sessions=sessions,
        base_training=metrics,
    )
    return report, params, metrics


@dataclass
class ExperimentResult:
    report: SessionReport
    params: enc.EncoderParams
    classifier: object | None
    timing: dict

    def timing_dict(self) -> dict:
        return self.timing


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """End-to-end run of the configured method; returns the report plus the
    trained artifacts and wall-clock timings (reported separately so the
    JSON report stays deterministic)."""
    t0 = time.perf_counter()
    train, test = resolve_datasets(config)
    splits = make_session_splits(train, test, config.session_spec.to_spec())
    t_data = time.perf_counter()

    if config.method == "finetune":
        report, params, metrics = finetune_baseline(config, splits)
        classifier = None
        t_train = time.perf_counter()
    else:
        params, metrics, _ = train_base(config, splits.base_train)
        t_train = time.perf_counter()
        classifier = build_base_classifier(params, splits.base_train, config)
        report, classifier = run_incremental(params, classifier, splits, config)
        report.base_training = metrics
    t_end = time.perf_counter()
    timing = {
        "data_seconds": t_data - t0,
        "train_seconds": t_train - t_data,
        "incremental_seconds": t_end - t_train,
        "total_seconds": t_end - t0,
    }
    return ExperimentResult(
        report=report, params=params, classifier=classifier, timing=timing
    )


def ablation_matrix(config: ExperimentConfig) -> dict[str, ExperimentResult]:
    """Run the flag matrix {full, no SCL, no ACC, fixed alpha = 1} from one
    config.  All variants share the method "ours" and the config's seed."""
    variants: dict[str, dict] = {
        "full": {},
        "no_scl": {"disable_scl": True},
        "no_acc": {"disable_acc": True},
        "fixed_alpha_1": {"fixed_alpha": 1.0},
    }
    results: dict[str, ExperimentResult] = {}
    for name, flags in variants.items():
        variant = config.model_copy(deep=True)
        variant.method = "ours"
        variant.ablation.disable_scl = flags.get("disable_scl", False)
        variant.ablation.disable_acc = flags.get("disable_acc", False)
        variant.ablation.fixed_alpha = flags.get("fixed_alpha")
        results[name] = run_experiment(variant)
    return results


def export_embeddings(
    params: enc.EncoderParams, dataset: Dataset, path
) -> int:
    """Write (label, embedding...) CSV rows for external projection tools."""
    d = params.embedding_dim
    header = ["label"] + [f"e{i}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        if len(dataset):
            embeddings = enc.embed_batch(params, dataset.features)
            for lab, row in zip(dataset.labels, embeddings):
                writer.writerow([int(lab)] + [f"{v:.9g}" for v in row])
    return len(dataset)
