"""bookalign: align a book's sentences to a movie's subtitle timeline.

The pipeline parses a book and an SRT subtitle file, scores every
(subtitle sentence, book sentence) pair with nine similarity channels,
fuses the channels with a small convolutional network, and smooths the
per-node predictions with a chain CRF solved by exact dynamic
programming.
"""

from .errors import BookAlignError, DataError, NumericError, ParseError, TrainingDiverged

__version__ = "0.1.0"

__all__ = [
    "BookAlignError",
    "DataError",
    "NumericError",
    "ParseError",
    "TrainingDiverged",
    "__version__",
]
