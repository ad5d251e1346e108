class TaggerError(Exception):
    """Base error carrying the process exit code the CLI should return."""

    exit_code = 1

    def __init__(self, detail: str, exit_code: int = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(TaggerError):
    """Invalid configuration or command-line usage"""

    exit_code = 1


class DataError(TaggerError):
    """Unreadable or inconsistent data: corpora, embeddings, checkpoints"""

    exit_code = 2


class NumericError(TaggerError):
    """Non-finite loss or gradient"""

    exit_code = 3
