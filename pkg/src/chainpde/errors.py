"""Exception hierarchy shared by the pipeline stages.

The CLI maps these onto its exit codes: ``DataError`` and ``ParameterError``
exit with 2, ``ModelError`` with 3.
"""


class ChainpdeError(Exception):
    """Base class for all errors raised by this package."""


class DataError(ChainpdeError):
    """Input data is malformed, inconsistent or missing."""


class IngestError(DataError):
    """A record in an input file could not be parsed."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class AlignmentError(DataError):
    """Dates of two inputs do not line up."""

    def __init__(self, message, missing=()):
        self.missing = tuple(missing)
        super().__init__(message)


class ZeroVolumeDay(DataError):
    """A day has no transaction volume, so cluster shares are undefined."""

    def __init__(self, date):
        self.date = date
        super().__init__(f"zero total volume on {date}")


class InsufficientData(DataError):
    pass


class ParameterError(ChainpdeError, ValueError):
    """An argument or configuration value is out of its valid range."""


class ModelError(ChainpdeError):
    """The model cannot be built or solved for the given data."""


class UndefinedCorrelation(ModelError, ValueError):
    """One of the series has zero variance."""


class DisconnectedSupergraph(ModelError):
    def __init__(self, components):
        self.components = [sorted(int(c) for c in comp) for comp in components]
        listing = "; ".join(",".join(map(str, c)) for c in self.components)
        super().__init__(
            f"cluster supergraph is disconnected ({len(self.components)} components: {listing})"
        )


class DivergenceError(ModelError):
    """The time integration produced non-finite values."""

    def __init__(self, time):
        self.time = float(time)
        super().__init__(f"solution diverged at t={self.time:.6g}")
