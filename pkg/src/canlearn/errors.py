"""Exception hierarchy shared by all canlearn modules."""


class CanLearnError(Exception):
    """Base class for every error raised by canlearn."""


class InvalidMatrix(CanLearnError, ValueError):
    pass


class InvalidInput(CanLearnError, ValueError):
    pass


class NotSquare(InvalidMatrix):
    pass


class NotPsd(InvalidMatrix):
    pass


class ShapeError(CanLearnError, ValueError):
    pass


class StructureMismatch(CanLearnError, ValueError):
    pass


class DegenerateProx(CanLearnError, ArithmeticError):
    """The Stiefel projection is not unique because the input is rank deficient."""


class NotADag(CanLearnError, ValueError):
    pass


class RankOrderViolation(CanLearnError, ValueError):
    """The low-level covariance has smaller rank than the high-level one."""


class MissingStructure(CanLearnError, KeyError):
    def __init__(self, pair):
        super().__init__(pair)
        self.pair = pair

    def __str__(self):
        return f"no abstraction structure for pair {self.pair}"


class MissingMap(CanLearnError, ValueError):
    pass


class DisconnectedTopology(CanLearnError, ValueError):
    pass


class SchemaError(CanLearnError, ValueError):
    """Malformed dataset document; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class DatasetIOError(CanLearnError, OSError):
    pass


class RankMismatchWarning(UserWarning):
    """Rank of the pushed-forward covariance differs from the target rank."""
