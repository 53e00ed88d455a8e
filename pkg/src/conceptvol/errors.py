"""Exception types raised across the package."""


class ConceptVolError(ValueError):
    """Base class for domain errors.

    ``code`` is a short, stable, machine-parsable identifier that the CLI
    prints on failure.
    """

    code = "error"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class FormatError(ConceptVolError):
    code = "format"


class BadMagicError(FormatError):
    code = "bad-magic"


class TruncatedError(FormatError):
    code = "truncated"


class NonFiniteError(FormatError):
    code = "non-finite"


class MeshError(ConceptVolError):
    code = "mesh"


class ShapeError(ConceptVolError):
    code = "shape"
