"""Exception taxonomy shared by all mcdiff modules."""


class McdiffError(Exception):
    """Base class for all errors raised by this package."""


# --- data model ---------------------------------------------------------
class DimMismatch(McdiffError):
    """Mask / tensor / panel lengths disagree."""


class EmptyObservedSet(McdiffError):
    """A condition requires at least one observed channel."""


class SizeTooLarge(McdiffError):
    """Requested tile size exceeds the image extent."""


class BadMagic(McdiffError):
    """File does not start with the expected magic bytes."""


class VersionUnsupported(McdiffError):
    """Container or checkpoint declares an unknown format version."""


class TruncatedFile(McdiffError):
    """File ends before the declared payload."""


class PanelCountMismatch(McdiffError):
    """Header channel count disagrees with the names block."""


class UnknownChannel(McdiffError):
    """A channel name is not part of the panel."""


class StatsMismatch(McdiffError):
    """Normalization statistics differ from the checkpoint's."""


# --- schedule -----------------------------------------------------------
class BadTimesteps(McdiffError):
    """Schedule length below the minimum."""


class TimestepOutOfRange(McdiffError):
    """Timestep index outside the valid range for the operation."""


# --- network ------------------------------------------------------------
class ShapeMismatch(McdiffError):
    """Tensor shapes incompatible (also guards spatial alignment)."""


class LevelWeightsMissing(McdiffError):
    """Full channel attention requested at a level without projections."""


class BadConfig(McdiffError):
    """Invalid network / training / sampler configuration."""


# --- training -----------------------------------------------------------
class NonFiniteLoss(McdiffError):
    """Loss became NaN/Inf; carries step and timestep diagnostics."""

    def __init__(self, step: int, timesteps, loss: float):
        super().__init__(
            f"non-finite loss {loss!r} at step {step} (t draws: {list(timesteps)})"
        )
        self.step = step
        self.timesteps = list(timesteps)
        self.loss = loss


# --- evaluation ---------------------------------------------------------
class LengthMismatch(McdiffError):
    """Vectors passed to a metric have different lengths."""


class TooShort(McdiffError):
    """Metric input shorter than the required minimum."""


class PanelMismatch(McdiffError):
    """Prediction and truth datasets have different panels or shapes."""


class EmptyProtocol(McdiffError):
    """Evaluation protocol invoked with zero trials."""


class SingularSystem(McdiffError):
    """Ridge parameter non-positive (system would be singular)."""


class NoOverlap(McdiffError):
    """Two panels share no channel."""


# --- synth --------------------------------------------------------------
class BadSpec(McdiffError):
    """Synthetic data specification is inconsistent."""
