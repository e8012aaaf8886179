"""Few-shot class-incremental learning toolkit.

Base-phase training combines cross-entropy with a supervised contrastive
loss over momentum-encoded keys; incremental phases freeze the encoder and
classify with per-class Mahalanobis distances under adaptively shrunk
covariances.  Ships a FastAPI service and a thin CLI client.
"""

__version__ = "0.1.0"
