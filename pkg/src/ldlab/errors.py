"""Exception types shared across the package."""


class LdlabError(Exception):
    """Base class for all package-specific errors."""


class InvalidBBox(LdlabError, ValueError):
    pass


class InvalidCategory(LdlabError, ValueError):
    pass


class TooManyObjects(LdlabError, ValueError):
    pass


class DimensionMismatch(LdlabError, ValueError):
    pass


class ShapeMismatch(LdlabError, ValueError):
    pass


class NonFiniteInput(LdlabError, ValueError):
    pass


class InvalidGrid(LdlabError, ValueError):
    pass


class InvalidSchedule(LdlabError, ValueError):
    pass


class IndexOutOfRange(LdlabError, IndexError):
    pass


class InvalidStepCount(LdlabError, ValueError):
    pass


class SpecInfeasible(LdlabError, RuntimeError):
    """Rejection sampling could not satisfy the scene constraints."""


class ParseError(LdlabError, ValueError):
    def __init__(self, message, line=None, position=None):
        detail = message
        if line is not None:
            detail += f" (line {line}"
            if position is not None:
                detail += f", column {position}"
            detail += ")"
        super().__init__(detail)
        self.line = line
        self.position = position


class InsufficientData(LdlabError, ValueError):
    pass


class ConfigError(LdlabError, ValueError):
    pass


class ResumeMismatch(LdlabError, RuntimeError):
    pass


class CheckpointMismatch(LdlabError, RuntimeError):
    pass


class LayoutInvalid(LdlabError, ValueError):
    pass
