"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid or missing configuration; ``path`` locates the offending field."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
