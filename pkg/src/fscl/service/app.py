"""FastAPI service wrapping the toolkit.

Every endpoint body-parses a request model from :mod:`schemas`, calls into
the core package, writes artifacts under the request's ``out_dir`` on the
service host, and returns a JSON summary.  Domain errors surface as
HTTP 400 with a machine-readable payload.
"""

from __future__ import annotations

import time
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from .. import checkpoint, encoder as enc, harness
from ..errors import ConfigError, FsclError
from ..feature_store import load_feature_store, split_train_test, synth_gaussian_dataset, write_feature_store
from . import schemas

app = FastAPI(title="fscl", version=__version__)


@app.exception_handler(FsclError)
async def _domain_error(_: Request, exc: FsclError) -> JSONResponse:
    return JSONResponse(status_code=400, content=exc.payload())


@app.exception_handler(OSError)
async def _io_error(_: Request, exc: OSError) -> JSONResponse:
    return JSONResponse(status_code=400, content={"error": "io_error", "message": str(exc)})


@app.get("/health", response_model=schemas.HealthResponse)
def health() -> schemas.HealthResponse:
    return schemas.HealthResponse(version=__version__)


@app.post("/datasets/synthetic", response_model=schemas.SynthGenResponse)
def synth_gen(req: schemas.SynthGenRequest) -> schemas.SynthGenResponse:
    spec = req.synthetic
    pool = synth_gaussian_dataset(
        n_classes=spec.n_classes,
        per_class=spec.train_per_class + spec.test_per_class,
        shape=tuple(spec.shape),
        mean_separation=spec.mean_separation,
        noise_sd=spec.noise_sd,
        seed=spec.seed,
    )
    train, test = split_train_test(pool, spec.train_per_class, spec.test_per_class)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_path, test_path = out / "train.fscl", out / "test.fscl"
    write_feature_store(train, train_path)
    write_feature_store(test, test_path)
    return schemas.SynthGenResponse(
        train_path=str(train_path),
        test_path=str(test_path),
        n_train=len(train),
        n_test=len(test),
        n_classes=pool.n_classes,
        shape=pool.shape,
    )


@app.post("/train/base", response_model=schemas.TrainBaseResponse)
def train_base(req: schemas.TrainBaseRequest) -> schemas.TrainBaseResponse:
    t0 = time.perf_counter()
    train, test = harness.resolve_datasets(req.config)
    splits = harness.make_session_splits(train, test, req.config.session_spec.to_spec())
    params, metrics, _ = harness.train_base(req.config, splits.base_train)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    encoder_path = out / "encoder.fscm"
    metrics_path = out / "base_metrics.json"
    checkpoint.save_encoder(params, encoder_path)
    metrics_path.write_text(harness.canonical_json(metrics.to_dict()))
    timing = {"total_seconds": time.perf_counter() - t0}
    (out / "timing.json").write_text(harness.canonical_json(timing))
    return schemas.TrainBaseResponse(
        encoder_path=str(encoder_path),
        metrics_path=str(metrics_path),
        epochs=metrics.epochs,
        final_train_accuracy=metrics.final_train_accuracy,
        final_loss=metrics.loss_total[-1] if metrics.loss_total else None,
        timing=timing,
    )


@app.post("/sessions/run", response_model=schemas.RunSessionsResponse)
def run_sessions(req: schemas.RunSessionsRequest) -> schemas.RunSessionsResponse:
    config = req.config
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if req.encoder_path is not None:
        if config.method == "finetune":
            raise ConfigError("the finetune baseline re-trains; omit encoder_path")
        t0 = time.perf_counter()
        params = checkpoint.load_encoder(req.encoder_path)
        train, test = harness.resolve_datasets(config)
        splits = harness.make_session_splits(train, test, config.session_spec.to_spec())
        classifier = harness.build_base_classifier(params, splits.base_train, config)
        report, classifier = harness.run_incremental(params, classifier, splits, config)
        result = harness.ExperimentResult(
            report=report, params=params, classifier=classifier,
            timing={"total_seconds": time.perf_counter() - t0},
        )
    else:
        result = harness.run_experiment(config)

    report_path = out / "report.json"
    csv_path = out / "report.csv"
    timing_path = out / "timing.json"
    encoder_path = out / "encoder.fscm"
    report_path.write_text(result.report.to_json())
    csv_path.write_text(result.report.to_csv())
    timing_path.write_text(harness.canonical_json(result.timing))
    checkpoint.save_encoder(result.params, encoder_path)
    classifier_path = None
    if isinstance(result.classifier, harness.ACCClassifier):
        classifier_path = out / "classifier.fscm"
        checkpoint.save_classifier(result.classifier, classifier_path)
    return schemas.RunSessionsResponse(
        report=result.report.to_dict(),
        report_path=str(report_path),
        csv_path=str(csv_path),
        timing_path=str(timing_path),
        encoder_path=str(encoder_path),
        classifier_path=str(classifier_path) if classifier_path else None,
        timing=result.timing,
    )


@app.post("/evaluate", response_model=schemas.EvalResponse)
def evaluate(req: schemas.EvalRequest) -> schemas.EvalResponse:
    params = checkpoint.load_encoder(req.encoder_path)
    classifier = checkpoint.load_classifier(req.classifier_path)
    dataset = load_feature_store(req.dataset_path, split="test")
    accuracy, per_class = harness.evaluate_top1(
        lambda feats: classifier.predict_embeddings(enc.embed_batch(params, feats)),
        dataset,
    )
    return schemas.EvalResponse(
        accuracy=accuracy,
        n_test=len(dataset),
        per_class_accuracy={str(c): a for c, a in sorted(per_class.items())},
    )


@app.post("/embeddings/export", response_model=schemas.ExportEmbeddingsResponse)
def export_embeddings(req: schemas.ExportEmbeddingsRequest) -> schemas.ExportEmbeddingsResponse:
    params = checkpoint.load_encoder(req.encoder_path)
    dataset = load_feature_store(req.dataset_path)
    out_path = Path(req.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = harness.export_embeddings(params, dataset, out_path)
    return schemas.ExportEmbeddingsResponse(
        out_path=str(out_path), rows=rows, embedding_dim=params.embedding_dim
    )


@app.post("/ablate", response_model=schemas.AblateResponse)
def ablate(req: schemas.AblateRequest) -> schemas.AblateResponse:
    t0 = time.perf_counter()
    results = harness.ablation_matrix(req.config)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants: dict[str, schemas.AblateVariantSummary] = {}
    rows = []
    for name, result in results.items():
        vdir = out / name
        vdir.mkdir(parents=True, exist_ok=True)
        report_path = vdir / "report.json"
        report_path.write_text(result.report.to_json())
        (vdir / "report.csv").write_text(result.report.to_csv())
        (vdir / "timing.json").write_text(harness.canonical_json(result.timing))
        accs = [s.cumulative_accuracy for s in result.report.sessions]
        variants[name] = schemas.AblateVariantSummary(
            final_accuracy=result.report.final_accuracy,
            session_accuracies=accs,
            report_path=str(report_path),
        )
        rows.append((name, accs))
    n_sessions = max(len(accs) for _, accs in rows)
    lines = ["variant," + ",".join(f"session_{i}" for i in range(n_sessions))]
    for name, accs in rows:
        lines.append(name + "," + ",".join(f"{a:.6f}" for a in accs))
    summary_path = out / "ablation_summary.csv"
    summary_path.write_text("\n".join(lines) + "\n")
    return schemas.AblateResponse(
        variants=variants,
        summary_csv_path=str(summary_path),
        timing={"total_seconds": time.perf_counter() - t0},
    )
