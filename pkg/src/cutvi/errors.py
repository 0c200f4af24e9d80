"""Exception types shared across the package."""


class CutVIError(Exception):
    """Base class for package errors."""


class StructureError(CutVIError, ValueError):
    """A model, partition or parameter vector is malformed."""


class NumericError(CutVIError, ArithmeticError):
    """A computation produced a non-finite value.

    Attributes:
        factor: name of the offending factor, when known.
        iteration: optimizer or sampler iteration, when known.
    """

    def __init__(self, message, factor=None, iteration=None):
        super().__init__(message)
        self.factor = factor
        self.iteration = iteration


class UnsupportedModelError(CutVIError):
    """The requested method cannot handle this model."""


class DegenerateCutError(NumericError):
    """Deleting a message left a non-positive precision."""


class UnsupportedCheckError(UnsupportedModelError):
    """The conflict check needs a w-side simulator the model lacks."""


class DataFileError(StructureError):
    """A data file is missing, unreadable, or violates its schema.

    Attributes:
        path: file that failed.
        row: 1-based line number of the offending row (header is line 1), when known.
    """

    def __init__(self, message, path=None, row=None):
        where = str(path) if path is not None else "<data>"
        if row is not None:
            where += f", line {row}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.row = row
