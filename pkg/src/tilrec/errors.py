class TilrecError(Exception):
    pass


class ParseError(TilrecError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class EmptyDatasetError(TilrecError):
    pass


class ConfigError(TilrecError):
    """Invalid experiment or training configuration; ``field`` names the culprit."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class NumericalFault(TilrecError):
    """Non-finite loss or gradient during training.

    ``snapshot`` carries the last parameters known to be finite, when available.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
