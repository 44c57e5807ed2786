"""Exception hierarchy. Each error knows the CLI exit code it maps to."""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class HscrfError(Exception):
    """Base class for all hscrf errors."""

    exit_code = EXIT_RUNTIME


class UsageError(HscrfError):
    exit_code = EXIT_USAGE


class ConfigError(HscrfError):
    """Invalid or unknown configuration keys/values."""

    exit_code = EXIT_USAGE


class DataError(HscrfError):
    """Unparseable or invalid dataset / provider-store files."""

    exit_code = EXIT_DATA

    def __init__(self, message: str, path: str = "", line: int = 0, instance_id: str = ""):
        location = ""
        if path:
            location = f"{path}:{line}: " if line else f"{path}: "
        if instance_id:
            location += f"instance {instance_id}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line
        self.instance_id = instance_id


class HscrfRuntimeError(HscrfError):
    exit_code = EXIT_RUNTIME


class GraphTooLarge(HscrfRuntimeError):
    pass


class GraphBuildError(HscrfRuntimeError):
    pass


class UnresolvableComponentError(HscrfRuntimeError):
    pass


class DisconnectedGraphError(HscrfRuntimeError):
    pass


class LearningError(HscrfRuntimeError):
    pass


class MetricError(HscrfRuntimeError):
    pass


class ReportWriteError(HscrfRuntimeError):
    """Output files or directories could not be written."""
