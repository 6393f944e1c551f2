"""Exception types raised by the engine."""


class MatRelError(Exception):
    """Base class for every engine error."""


class DimMismatch(MatRelError):
    pass


class DivisionByZero(MatRelError, ZeroDivisionError):
    """A nonzero numerator met a zero denominator, or a merge function
    could not be evaluated (division by zero, log of a non-positive)."""


class UnknownMatrix(MatRelError, KeyError):
    pass


class NonSquareDiagonal(MatRelError):
    pass


class IndexOutOfRange(MatRelError, IndexError):
    pass


class EmptyProjection(MatRelError):
    pass


class IllegalScheme(MatRelError):
    pass


class IllegalJoin(MatRelError):
    pass


class UndefinedMerge(MatRelError):
    """Merge function with f(0, 0) != 0 on a join that would need to fill
    every position of the output."""


class ResourceLimit(MatRelError, MemoryError):
    pass


class RewriteBudgetExceeded(MatRelError):
    pass


class ParseError(MatRelError, ValueError):
    """Syntax error in a predicate, merge function, script or matrix file.

    ``offset`` is a 0-based character offset into the parsed text, ``line``
    a 1-based line number; either may be ``None``.
    """

    def __init__(self, msg, offset=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)
        self.msg = msg
        self.offset = offset
        self.line = line
