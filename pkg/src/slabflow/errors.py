"""Exception types shared across the package."""


class SlabflowError(Exception):
    """Base class for all package-specific errors."""


class DomainError(SlabflowError, ValueError):
    """An argument lies outside its mathematically valid range."""


class SingularityError(SlabflowError, ValueError):
    """A geometric quantity (tangent, normal) is degenerate."""


class FitError(SlabflowError, RuntimeError):
    """Least-squares fit system is rank deficient."""


class ConfigError(SlabflowError, ValueError):
    """Invalid or inconsistent run configuration."""


class MeshTangledError(SlabflowError, RuntimeError):
    """An element Jacobian became nonpositive.

    Carries the simulation time at which the mesh became invalid
    (or None when no time is attached).
    """

    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


class NewtonDivergedError(SlabflowError, RuntimeError):
    """Newton iteration hit the iteration cap without converging.

    Carries the residual-norm history of the failed solve.
    """

    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class CheckpointError(SlabflowError, ValueError):
    """Checkpoint file is corrupt, mismatched, or of unknown version."""
