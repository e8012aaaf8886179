"""Exception types shared across the toolkit.

Every failure the service or CLI reports as machine-readable JSON maps to one
of these classes; the ``kind`` attribute is the stable identifier clients
should switch on.
"""


class FsclError(Exception):
    """Base class for all toolkit errors."""

    kind = "error"

    def payload(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class FormatError(FsclError):
    """File does not start with the expected magic / version."""

    kind = "bad_format"


class TruncatedFileError(FsclError):
    """File ended before the payload declared in its header."""

    kind = "truncated_file"


class LabelRangeError(FsclError):
    """A sample label is outside the class count declared in the header."""

    kind = "label_out_of_range"


class InvalidDatasetError(FsclError):
    """Dataset contents violate an invariant (shape, finiteness, sign)."""

    kind = "invalid_dataset"


class SplitError(FsclError):
    """Session split request cannot be satisfied by the dataset."""

    kind = "bad_split"


class AugmentError(FsclError):
    """Augmentation asked for an out-of-bounds or ill-posed transform."""

    kind = "bad_augment"


class ShapeError(FsclError):
    """Tensor shape does not match what an operation expects."""

    kind = "shape_mismatch"


class ZeroVectorError(FsclError):
    """Projection input has (numerically) zero norm; refusing to normalize."""

    kind = "zero_vector"


class NonFiniteError(FsclError):
    """A non-finite value appeared where the math requires finite numbers."""

    kind = "non_finite"


class TrainingDivergedError(FsclError):
    """Loss became non-finite during optimization."""

    kind = "training_diverged"

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch

    def payload(self) -> dict:
        out = super().payload()
        out.update(epoch=self.epoch, batch=self.batch)
        return out


class DegenerateClassError(FsclError):
    """Class statistics collapsed (zero covariance); no usable model."""

    kind = "degenerate_class"


class FactorizationError(FsclError):
    """Adapted covariance could not be Cholesky-factorized."""

    kind = "factorization_failed"


class ConfigError(FsclError):
    """Experiment configuration is inconsistent or incomplete."""

    kind = "bad_config"
