"""Exception types shared across the package."""


class AttnProbeError(Exception):
    """Base class for all package-specific failures."""


class FormatError(AttnProbeError):
    """A binary file does not carry the expected magic/version."""


class TruncationError(FormatError):
    """Header dimensions disagree with the actual payload length."""


class CompatibilityError(AttnProbeError):
    """Checkpoint was produced under an incompatible configuration."""


class TrainingError(AttnProbeError):
    """Optimization diverged (non-finite loss)."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class UndefinedMetricError(AttnProbeError):
    """Metric is mathematically undefined for the given inputs."""


class GenerationError(AttnProbeError):
    """A generator backend failed to produce a trajectory."""
