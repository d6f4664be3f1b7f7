"""Exception and warning types shared across the package."""

from __future__ import annotations

import numpy as np


class IVError(Exception):
    """Base class for estimation failures."""


class DatasetError(ValueError):
    """Malformed or out-of-range observational data.

    ``row`` is the 1-based line number in the source file (header is line 1)
    when the error comes from file ingestion.
    """

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ModelError(ValueError):
    """Invalid structural model specification."""


class EmptyGroupError(IVError):
    def __init__(self, pair):
        self.pair = pair
        super().__init__(f"contrast pair {pair} touches an instrument level with no observations")


class UnderidentifiedError(IVError):
    """Raised when the identifying system does not have full column rank.

    ``null_space`` holds an orthonormal basis (columns) of the directions in
    theta that the data cannot pin down.
    """

    def __init__(self, rank: int, n: int, null_space: np.ndarray):
        self.rank = rank
        self.n = n
        self.null_space = null_space
        dirs = np.array2string(np.round(null_space.T, 6), separator=", ")
        super().__init__(f"rank {rank} < {n}; unidentified directions: {dirs}")


class WeakInstrumentError(IVError):
    pass


class InsufficientDataError(IVError):
    pass


class RegimeMismatchError(IVError):
    pass


class IVWarning(UserWarning):
    pass
