"""Exception hierarchy shared by all modules.

Every error raised on purpose derives from :class:`HomnetError` and carries a
``category`` the CLI maps to an exit code: usage=2, data=3, numeric=4, io=5.
"""

EXIT_CODES = {"usage": 2, "data": 3, "numeric": 4, "io": 5}


class HomnetError(Exception):
    category = "data"


class UsageError(HomnetError):
    category = "usage"


# ---- data errors -----------------------------------------------------------

class TooSmall(HomnetError):
    pass


class TooLong(HomnetError):
    pass


class InvalidType(HomnetError):
    pass


class InvalidBand(HomnetError):
    pass


class ParseError(HomnetError):
    pass


class InvariantViolation(HomnetError):
    pass


class SpanOutOfRange(HomnetError):
    pass


class MissingDonor(HomnetError):
    pass


class EmptyBag(HomnetError):
    pass


class SubjectOverlap(HomnetError):
    pass


class EmptyDataset(HomnetError):
    pass


class FreezeNameUnresolved(HomnetError):
    pass


class SingleClass(HomnetError):
    pass


class EmptyInput(HomnetError):
    pass


class DegenerateLength(HomnetError):
    pass


# ---- numeric errors --------------------------------------------------------

class ShapeMismatch(HomnetError):
    category = "numeric"


class NonScalarRoot(HomnetError):
    category = "numeric"


class NonFiniteValue(HomnetError):
    category = "numeric"


# ---- io errors -------------------------------------------------------------

class IoError(HomnetError):
    category = "io"


class BadMagic(IoError):
    pass


class VersionUnsupported(IoError):
    pass


class TruncatedFile(IoError):
    pass
