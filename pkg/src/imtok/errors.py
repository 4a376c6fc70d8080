"""Exception hierarchy shared by all imtok modules."""


class ImtokError(Exception):
    """Base class for every error raised by this package."""


class ParseError(ImtokError):
    """A binary payload (PPM/PGM file, token stream, checkpoint) is malformed."""


class UnsupportedFormat(ImtokError):
    """A file is structurally valid but uses a variant we do not decode."""


class InvalidLayout(ImtokError):
    """Patch geometry is inconsistent with the image or with itself."""


class ConfigError(ImtokError):
    """Shapes or configuration fields disagree with each other."""


class DomainError(ImtokError):
    """A numeric argument lies outside the mathematical domain of an operation."""


class EstimationError(ImtokError):
    """A statistical estimator cannot produce a meaningful value from its input."""


class OracleTooLarge(ImtokError):
    """An exhaustive verification oracle was asked to enumerate too large a space."""


class CapacityError(ImtokError):
    """More tokens were routed to the decoder than it has slots for."""


class ModelMismatch(ImtokError):
    """A serialized artifact references a different model than the one supplied."""


class TrainingDiverged(ImtokError):
    """The training loss became non-finite."""
