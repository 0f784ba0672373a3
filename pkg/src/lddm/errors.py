"""Exception types shared across the package."""


class GeometryError(ValueError):
    """Tensor or clip geometry does not match the configured geometry."""


class InvalidClipError(ValueError):
    """Clip values violate the clip invariants (non-finite or out of [0, 1])."""


class FormatError(ValueError):
    """Base class for on-disk container and checkpoint errors."""


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class PayloadGeometryError(FormatError, GeometryError):
    """Payload size is a whole number of frames but disagrees with the header."""


class CorruptPayloadError(FormatError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class MissingArtifactError(RuntimeError):
    """A pipeline stage was run before the stage it depends on."""


class ConfigError(ValueError):
    pass
