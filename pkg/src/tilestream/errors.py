"""Exception hierarchy shared by the runtime and the CLI."""


class TilestreamError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TilestreamError):
    """Shapes, parameters or configuration values are inconsistent."""


class ParseError(ConfigError):
    """A configuration file could not be parsed.

    The message always carries the file path and, for text formats, the
    1-based line number.
    """

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: {message}")


class WeightsFormatError(ConfigError):
    """A weights file has a bad header or a size that does not match the net."""


class LifecycleError(TilestreamError):
    """An operation was attempted on a stopped or shutting-down component."""


class ProtocolError(TilestreamError):
    """A processing engine received something that is not a valid job."""


class PipelineError(TilestreamError):
    """A pipeline stage failed; the original exception is chained."""
