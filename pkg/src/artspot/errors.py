"""Exception types shared across the package."""


class ArtspotError(Exception):
    """Base class for all package errors."""


class DomainError(ArtspotError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InsufficientDataError(ArtspotError, ValueError):
    pass


class DegenerateFitError(ArtspotError, ValueError):
    pass


class ShapeError(ArtspotError, ValueError):
    pass


class SingularSystemError(ArtspotError, ValueError):
    pass


class ConfigError(ArtspotError, ValueError):
    pass


class MissingGradientError(ArtspotError, KeyError):
    def __init__(self, name):
        super().__init__(f"parameter {name!r} has no gradient")
        self.name = name


class DatasetParseError(ArtspotError, ValueError):
    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no
