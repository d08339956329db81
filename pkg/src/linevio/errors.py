"""Exception types shared across the toolkit."""


class LinevioError(Exception):
    """Base class for all toolkit errors."""


class ParseError(LinevioError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class NonMonotoneTimestamps(LinevioError):
    pass


class NonPositiveDepth(LinevioError):
    pass


class DegenerateProjection(LinevioError):
    pass


class InsufficientCoverage(LinevioError):
    pass


class OutOfWindow(LinevioError):
    pass


class DegenerateCluster(LinevioError):
    pass


class SolverDiverged(LinevioError):
    pass


class RankDeficient(LinevioError):
    pass


class InsufficientOverlap(LinevioError):
    pass


class SegmentTooLong(LinevioError):
    pass
