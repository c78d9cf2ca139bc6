"""Exception types shared across the pipeline."""


class InputError(ValueError):
    """An input violates a documented precondition."""


class ConfigError(ValueError):
    """A pipeline configuration is malformed or out of range."""


class DegenerateInputError(InputError):
    """A geometric fit is underdetermined (too few or collinear points)."""


class NoOverlapError(RuntimeError):
    """Registration rejected every correspondence in every pass."""


class TrackingError(RuntimeError):
    """Sequence tracking failed; ``frame`` holds the offending frame index."""

    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message)
        self.frame = frame


class AmbiguousComponentError(RuntimeError):
    """A component selector matched zero or several candidates."""

    def __init__(self, message: str, candidates=()):
        super().__init__(message)
        self.candidates = tuple(candidates)


class NoConsensusError(RuntimeError):
    """RANSAC found no minimal sample with enough support."""


class ObjectLostError(RuntimeError):
    """The per-frame inlier intersection became empty.

    ``inlier_counts`` holds the number of motion-consistent background
    points for every frame of the interaction window, for diagnosis.
    """

    def __init__(self, message: str, inlier_counts=()):
        super().__init__(message)
        self.inlier_counts = tuple(int(c) for c in inlier_counts)


class MissingArtifactError(RuntimeError):
    """A pipeline stage is missing an upstream artifact file."""
