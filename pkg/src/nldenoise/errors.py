"""Exception hierarchy shared across the package."""


class NldenoiseError(Exception):
    """Base class for all package-specific errors."""


class FormatError(NldenoiseError):
    """Malformed volume/checkpoint file; carries the offending byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GeometryError(NldenoiseError):
    """Patch/volume geometry mismatch (sizes, origins, strides)."""


class CoverageError(NldenoiseError):
    """Reassembly target has voxels not covered by any patch."""


class ParameterError(NldenoiseError):
    """Invalid numeric parameter (out of domain)."""


class ConstantInputError(NldenoiseError):
    """Otsu thresholding on constant data has no valid threshold."""


class EmptyMaskError(NldenoiseError):
    """No voxel exceeds the foreground threshold."""


class EmptyBackgroundError(NldenoiseError):
    """Fewer than two voxels at or below the background threshold."""


class ShapeError(NldenoiseError):
    """Tensor shape mismatch in the network."""


class SamplingError(NldenoiseError):
    """Stratified batch sampling cannot be satisfied (empty bin)."""


class TrainingError(NldenoiseError):
    """Non-finite loss/gradients; aborts the training loop."""


class CheckpointError(NldenoiseError):
    """Checkpoint manifest/payload inconsistency."""


class MetricError(NldenoiseError):
    """Metric preconditions violated (dims, degenerate reference)."""


class DegenerateDifferencesError(NldenoiseError):
    """Paired test on differences with zero variance."""
