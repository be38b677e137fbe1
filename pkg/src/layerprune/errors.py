"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: anything derived from
InputError is a user mistake (exit 2), anything derived from NumericError
is a numerical or solver failure (exit 3).
"""


class InputError(ValueError):
    """Caller supplied invalid data, shapes, ranges or paths."""


class ShapeError(InputError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ContractError(InputError):
    """An API was used outside its stated contract (e.g. non-scalar backward root)."""


class FormatError(InputError):
    """A checkpoint file is malformed; message carries the byte offset."""


class NumericError(ArithmeticError):
    """A numerical failure: non-finite values or a failed factorization."""


class SolverError(NumericError):
    """An optimizer or linear solver failed to produce a usable result."""
