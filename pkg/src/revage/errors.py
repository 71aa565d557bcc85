"""Exception hierarchy for the re-aging toolkit."""


class RevageError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(RevageError):
    """A value violates a domain invariant."""


class IngestionError(RevageError):
    """Frame or clip data on disk is missing, inconsistent, or corrupt."""


class ManifestError(RevageError):
    """A dataset manifest is structurally inconsistent."""


class ConfigurationError(RevageError):
    """A network or run configuration is unusable."""


class BackendError(RevageError):
    """A pluggable backend failed to produce output."""


class MetricError(RevageError):
    """A metric is undefined for the given inputs."""


class TrainingDiverged(RevageError):
    """Training produced a non-finite loss."""


class UsageError(RevageError):
    """Bad command-line usage; maps to exit code 2."""
