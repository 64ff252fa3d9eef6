"""Exception types shared across the package."""


class CdvitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CdvitError):
    """Operands have incompatible shapes; the message names both shapes."""


class ConfigError(CdvitError):
    """A configuration value violates one of the model invariants."""


class IntegrityError(CdvitError):
    """Stored data (pyramid, manifest, parameter set) is inconsistent."""


class CheckpointError(CdvitError):
    """A checkpoint file is malformed or of an unexpected version."""


class TrainingDiverged(CdvitError):
    """Training hit a non-finite loss; carries diagnostics for the batch."""

    def __init__(self, message: str, step: int | None = None, pair_ids=None):
        super().__init__(message)
        self.step = step
        self.pair_ids = list(pair_ids) if pair_ids is not None else []
