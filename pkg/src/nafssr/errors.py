"""Exception types shared across the package, mapped to CLI exit codes."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar root, consumed tape, ...)."""


class ConfigError(ValueError):
    """Bad configuration: unknown keys, invalid variants, incompatible flags."""


class DataError(ValueError):
    """Unreadable or inconsistent dataset files."""


class NumericsError(RuntimeError):
    """Non-finite values where finite ones are required."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
