"""Exception hierarchy shared by all modules."""


class DynspcaError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DynspcaError, ValueError):
    pass


class DegenerateWindow(DynspcaError):
    """The local window at an evaluation time has too few distinct points.

    Usually means the bandwidth is too small for that time.
    """


class WrongDesign(DynspcaError):
    pass


class NotSymmetric(DynspcaError, ValueError):
    pass


class NotOrthonormal(DynspcaError, ValueError):
    pass


class TangentViolation(DynspcaError, ValueError):
    pass


class SubproblemFail(DynspcaError):
    pass


class EmptySupport(DynspcaError):
    pass


class SupportTooSmall(DynspcaError):
    pass


class NotProjection(DynspcaError, ValueError):
    pass


class DegenerateSpectrum(DynspcaError):
    pass


class AllCandidatesFailed(DynspcaError):
    pass


class GridMismatch(DynspcaError, ValueError):
    pass


class DataError(DynspcaError):
    """Base class for input-data problems (CLI exit code 2)."""


class ParseError(DataError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + loc)


class InconsistentDimensions(DataError):
    pass


class DuplicateTriple(DataError):
    pass
