"""Exception hierarchy.

Every error carries the process exit code the command line tool reports for
it: 2 for configuration problems, 3 for numerical or geometric failures and
4 when the data do not support an estimate.
"""


class GhostSimError(Exception):
    exit_code = 3


class InvalidArgumentError(GhostSimError, ValueError):
    exit_code = 2


class ConfigError(GhostSimError):
    """Configuration text could not be turned into a run."""

    exit_code = 2

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class GeometryError(GhostSimError):
    exit_code = 3


class DegenerateGeometryError(GeometryError):
    exit_code = 3


class AliasingError(GeometryError):
    """Grid sampling is too coarse for the requested propagation distance."""

    exit_code = 3

    def __init__(self, message, distance=None, max_distance=None):
        self.distance = distance
        self.max_distance = max_distance
        super().__init__(message)


class ContractError(GhostSimError):
    exit_code = 3


class DegenerateDataError(GhostSimError):
    exit_code = 4


class InsufficientBaselineError(DegenerateDataError):
    exit_code = 4


class NoPeakError(DegenerateDataError):
    exit_code = 4
