"""Exception types shared across the package."""


class FabnetError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FabnetError):
    """Operands have incompatible or malformed shapes."""


class GraphError(FabnetError):
    """A tensor or node does not belong to the tape being used."""


class ConfigError(FabnetError):
    """A configuration value is invalid or inconsistent."""


class FormatError(FabnetError):
    """A checkpoint file is corrupt, truncated, or of the wrong version."""


class ManifestError(FabnetError):
    """A dataset manifest is missing, malformed, or inconsistent."""


class ImageFormatError(FabnetError):
    """An image file is not a decodable binary PPM/PGM."""


class SplitError(FabnetError):
    """A dataset cannot be split as requested."""


class DivergenceError(FabnetError):
    """Training produced a non-finite loss."""
