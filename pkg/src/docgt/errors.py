"""Exception hierarchy shared by all docgt modules."""


class DocGTError(Exception):
    """Base class for every error raised by docgt."""


class InvalidParameterError(DocGTError, ValueError):
    pass


class InvalidInputError(DocGTError, ValueError):
    pass


class EmptyRegionError(DocGTError, ValueError):
    pass


class SingularTransformError(DocGTError, ValueError):
    pass


class PointAtInfinityError(DocGTError, ValueError):
    pass


class InsufficientDataError(DocGTError, ValueError):
    pass


class DegenerateConfigurationError(DocGTError, ValueError):
    pass


class NumericalFailureError(DocGTError, ArithmeticError):
    pass


class DegenerateRegionError(DocGTError, ValueError):
    pass


class DegenerateQuadError(DocGTError, ValueError):
    pass


class InsufficientPointsError(DocGTError, ValueError):
    pass


class EmptyDatabaseError(DocGTError, LookupError):
    pass


class NoMatchError(DocGTError, LookupError):
    """Retrieval found no document with enough votes."""

    def __init__(self, message, best_doc=None, score=0):
        super().__init__(message)
        self.best_doc = best_doc
        self.score = score


class ParseError(DocGTError, ValueError):
    """Schema violation; ``pointer`` is a JSON pointer to the offending node."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class ConsistencyError(DocGTError, ValueError):
    pass


class UndefinedAccuracyError(DocGTError, ValueError):
    pass


class SpecError(DocGTError, ValueError):
    pass
