"""Exception hierarchy shared by every module of the codec."""


class PsurfelError(Exception):
    """Base class for all codec errors."""


class EmptyInputError(PsurfelError, ValueError):
    pass


class CoordinateRangeError(PsurfelError, ValueError):
    pass


class DegenerateError(PsurfelError, ValueError):
    """Raised for degenerate nodes or parameters (zero quaternion, level-0 node, ...)."""


class PlyParseError(PsurfelError, ValueError):
    pass


class CorruptStreamError(PsurfelError):
    pass


class TruncatedStreamError(CorruptStreamError):
    pass


class NonOverlapError(PsurfelError, ValueError):
    pass


class EmptySelectionError(PsurfelError, ValueError):
    pass
