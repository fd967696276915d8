"""Exception hierarchy.

Every failure that stems from bad data, bad configuration or a numerically
degenerate situation derives from :class:`VisitflowError`; the CLI maps these
to exit status 1.
"""


class VisitflowError(Exception):
    """Base class for domain and validation failures."""


class ShapeError(VisitflowError, ValueError):
    pass


class ConfigError(VisitflowError, ValueError):
    pass


class DegenerateOriginError(VisitflowError, ValueError):
    def __init__(self, origin_id):
        super().__init__(f"origin {origin_id!r} has zero total outgoing visits")
        self.origin_id = origin_id


class CoverageError(VisitflowError, KeyError):
    def __init__(self, origin_id, hospital_id):
        super().__init__(f"no drive time for pair ({origin_id!r}, {hospital_id!r})")
        self.pair = (origin_id, hospital_id)

    def __str__(self):
        return self.args[0]


class SchemaError(VisitflowError, ValueError):
    pass


class RowError(VisitflowError, ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class IntegrityError(VisitflowError, ValueError):
    pass


class WindowError(VisitflowError, ValueError):
    pass


class EmptyDatasetError(VisitflowError, ValueError):
    pass


class InsufficientDataError(VisitflowError, ValueError):
    pass


class DivergenceError(VisitflowError, FloatingPointError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch


class CandidateError(VisitflowError, ValueError):
    pass


class UndefinedRangeError(VisitflowError, ValueError):
    pass


class UndefinedOverlapError(VisitflowError, ValueError):
    pass


class MetricDomainError(VisitflowError, ValueError):
    pass


class ProtocolError(VisitflowError, ValueError):
    pass


class GridError(VisitflowError, ValueError):
    pass


class ScopeError(VisitflowError, ValueError):
    pass


class GenerationError(VisitflowError, ValueError):
    pass


class PairingError(VisitflowError, ValueError):
    pass


class RangeError(VisitflowError, ValueError):
    pass
