"""Exception hierarchy shared across the toolkit."""


class MgaError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(MgaError, ValueError):
    """Bad input detected before any work is done."""


class GeometryMismatch(ValidationError):
    pass


class DegenerateMask(ValidationError):
    """Mask is uniform, so distances or surfaces are undefined."""


class NegativeTau(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class ConstantVolume(ValidationError):
    pass


class EmptyReference(ValidationError):
    pass


class EmptyList(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class ConfigInvalid(InvalidConfig):
    """Run configuration failed schema validation."""


class UnknownCommand(ValidationError):
    pass
