"""Exception types shared across the pipeline."""


class DataError(ValueError):
    """Input data is missing, empty, or inconsistent with the request."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or could not proceed."""


class OptimizationError(RuntimeError):
    """Latent optimization produced a non-finite objective."""


class DependencyError(RuntimeError):
    """A prerequisite artifact (checkpoint, cache, generator) is absent."""


class LayoutError(DataError):
    """Dataset directory does not follow the real/ gan/<model>/ dm/<model>/ layout."""
