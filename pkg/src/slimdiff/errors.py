"""Exception hierarchy shared across the package."""


class SlimdiffError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SlimdiffError):
    """Invalid architecture or run configuration."""


class DimensionError(SlimdiffError):
    """Tensor shape does not match the declared contract."""


class DomainError(SlimdiffError):
    """Scalar argument outside its valid domain (timesteps, strengths, ...)."""


class PlanError(SlimdiffError):
    """Compression plan references blocks that do not exist or cannot be touched."""


class StructuralError(SlimdiffError):
    """A removal would break skip balance or the channel signature of the net."""


class InheritanceError(SlimdiffError):
    """Teacher -> student weight mapping is inconsistent with the models."""


class ArchiveError(SlimdiffError):
    """Named-tensor archive is malformed or does not match the model."""


class NumericalError(SlimdiffError):
    """Training or sampling produced non-finite values."""
