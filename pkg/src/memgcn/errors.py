class ValidationError(ValueError):
    """Bad shapes, bad configuration values or malformed inputs."""


class NumericalError(ArithmeticError):
    """Non-finite values or an iterative routine that failed to converge."""


class ParseError(ValueError):
    def __init__(self, path, row, col, message):
        self.path, self.row, self.col = path, row, col
        super().__init__(f"{path}: row {row}, column {col}: {message}")
