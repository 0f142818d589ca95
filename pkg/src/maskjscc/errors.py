"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its admissible range."""


class ShapeError(ValueError):
    """Array dimensions do not satisfy an operation's contract."""


class InputError(ValueError):
    """Input data contains NaN/Inf or is otherwise unusable."""


class StateError(RuntimeError):
    """An operation was called before a required stage or artifact exists."""


class DegenerateBasisError(ParameterError):
    """Subspace basis is (numerically) rank deficient."""

    def __init__(self, msg: str = "degenerate basis"):
        super().__init__(msg)
