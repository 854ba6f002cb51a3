"""Exception hierarchy shared by every genfsl module."""


class GenFSLError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(GenFSLError, ValueError):
    """Tensor dimensions are inconsistent with an operation."""


class GeometryError(GenFSLError, ValueError):
    """Layer geometry yields an empty or invalid output."""


class NonFiniteError(GenFSLError, FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


class DataError(GenFSLError):
    """Dataset content or selection request is invalid."""


class PGMError(DataError):
    """Malformed PGM file; ``field`` names the offending header field."""

    def __init__(self, field, message):
        super().__init__(f"PGM {field}: {message}")
        self.field = field


class TransferError(GenFSLError):
    """Encoder weights cannot be transferred from a checkpoint."""

    def __init__(self, entry, message):
        super().__init__(f"{entry}: {message}")
        self.entry = entry


class CheckpointError(GenFSLError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DivergenceError(GenFSLError):
    """Training loss became non-finite."""

    def __init__(self, epoch, batch, loss):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch} (loss={loss})")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class ConfigError(GenFSLError, ValueError):
    """Invalid or unknown configuration value."""
