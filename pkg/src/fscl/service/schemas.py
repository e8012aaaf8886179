"""Pydantic request/response models of the service API.

Requests embed the same :class:`~fscl.config.ExperimentConfig` document the
CLI reads from ``--config``; paths are interpreted on the service host.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field

from ..config import ExperimentConfig, SyntheticDataConfig


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class SynthGenRequest(BaseModel):
    synthetic: SyntheticDataConfig
    out_dir: str


class SynthGenResponse(BaseModel):
    train_path: str
    test_path: str
    n_train: int
    n_test: int
    n_classes: int
    shape: tuple[int, int, int]


class TrainBaseRequest(BaseModel):
    config: ExperimentConfig
    out_dir: str


class TrainBaseResponse(BaseModel):
    encoder_path: str
    metrics_path: str
    epochs: int
    final_train_accuracy: float
    final_loss: Optional[float] = None
    timing: dict


class RunSessionsRequest(BaseModel):
    config: ExperimentConfig
    out_dir: str
    encoder_path: Optional[str] = Field(
        default=None,
        description="reuse a trained encoder checkpoint instead of training",
    )


class RunSessionsResponse(BaseModel):
    report: dict
    report_path: str
    csv_path: str
    timing_path: str
    encoder_path: str
    classifier_path: Optional[str] = None
    timing: dict


class EvalRequest(BaseModel):
    encoder_path: str
    classifier_path: str
    dataset_path: str


class EvalResponse(BaseModel):
    accuracy: float
    n_test: int
    per_class_accuracy: dict[str, float]


class ExportEmbeddingsRequest(BaseModel):
    encoder_path: str
    dataset_path: str
    out_path: str


class ExportEmbeddingsResponse(BaseModel):
    out_path: str
    rows: int
    embedding_dim: int


class AblateRequest(BaseModel):
    config: ExperimentConfig
    out_dir: str


class AblateVariantSummary(BaseModel):
    final_accuracy: float
    session_accuracies: list[float]
    report_path: str


class AblateResponse(BaseModel):
    variants: dict[str, AblateVariantSummary]
    summary_csv_path: str
    timing: dict


class ErrorResponse(BaseModel):
    error: str
    message: str
