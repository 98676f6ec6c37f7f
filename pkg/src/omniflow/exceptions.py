"""Exception types shared across the package."""


class RejectedInputError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class TrainingDivergenceError(FloatingPointError):
    """Raised when a forward pass or loss produces non-finite values."""

    def __init__(self, message, block_index=None):
        super().__init__(message)
        self.block_index = block_index


class SamplerDivergenceError(FloatingPointError):
    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class ExhaustedDataError(RuntimeError):
    """No nonempty bucket is left to draw a batch from."""


class ManifestError(ValueError):
    def __init__(self, message, line_number=None):
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)
        self.line_number = line_number
