class ConfigError(ValueError):
    """Invalid configuration or parameter combination."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""
