"""
Exception hierarchy shared by every module.

Each error carries the process exit code the CLI returns when it escapes a
subcommand.
"""

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3


class StreamError(Exception):
    exit_code = EXIT_DATA


class ContractError(StreamError, ValueError):
    """Shape, dimension or precondition violation."""
    exit_code = EXIT_USAGE


class PropagationError(StreamError, ArithmeticError):
    """A non-finite value appeared; ``index`` locates the offending step."""

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (at index {index})"
        super().__init__(message)
        self.index = index


class OrderError(StreamError, ValueError):
    """Causal index order or coordinate ordering violated."""


class ConfigurationError(StreamError, ValueError):
    exit_code = EXIT_USAGE


class DataError(StreamError, ValueError):
    """Malformed input data; ``line`` is 1-based (text) or the record number (binary)."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class CheckpointError(StreamError):
    pass


class TrainingDivergedError(StreamError, ArithmeticError):

    def __init__(self, message, dump_path=None):
        if dump_path is not None:
            message = f"{message}; diagnostic dump written to {dump_path}"
        super().__init__(message)
        self.dump_path = dump_path
