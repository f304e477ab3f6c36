"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: usage errors are raised by argparse
itself, ``ParseError``/``DataError`` exit with 2, ``NumericError`` (and
its ``TrainingDiverged`` subclass) with 3.
"""


class BookAlignError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(BookAlignError):
    """Raw input (book text, SRT, TSV, binary vector file) is malformed."""


class DataError(BookAlignError):
    """Inputs are well-formed but violate a contract (shape, range, emptiness)."""


class NumericError(BookAlignError):
    """A numeric invariant was broken (non-finite value, zero-norm vector)."""


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss.

    Carries the last parameter snapshot that still had a finite loss so
    callers can checkpoint it.
    """

    def __init__(self, message, last_good_params=None):
        super().__init__(message)
        self.last_good_params = last_good_params
