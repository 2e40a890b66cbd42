"""Exception types shared across the toolkit."""


class Cube3DError(Exception):
    """Base class for all toolkit errors; the CLI maps these to exit code 1."""


class ShapeError(Cube3DError):
    """Shape, extent, rank or axis mismatch."""


class FormatError(Cube3DError):
    """Malformed file content (PPM headers, tensor containers, checkpoints)."""


class ValidationError(Cube3DError):
    """Invalid annotations, labels, manifests or derived quantities."""


class ConfigError(ValidationError):
    """Invalid configuration value."""


class StateError(Cube3DError):
    """Operation called in the wrong order, e.g. backward without a cached forward."""


class DivergenceError(Cube3DError):
    """Training produced a non-finite loss."""
