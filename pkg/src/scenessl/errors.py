"""Exception types shared across the engine."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class DimensionError(ContractError):
    pass


class NumericInstabilityError(ArithmeticError):
    """A forward pass produced NaN or Inf values."""

    def __init__(self, layer: str, message: str = ""):
        self.layer = layer
        super().__init__(message or f"non-finite values produced by layer {layer!r}")


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"non-finite gradient in parameters: {', '.join(self.names)}")


class FingerprintError(ContractError):
    """A checkpoint does not match the configuration it is being loaded into."""

    def __init__(self, diff: dict):
        self.diff = diff
        lines = [f"  {k}: checkpoint={a!r} expected={b!r}" for k, (a, b) in sorted(diff.items())]
        super().__init__("checkpoint fingerprint mismatch:\n" + "\n".join(lines))


class LineageError(ContractError):
    pass


class DataError(ValueError):
    """Dataset construction failed (empty remap, undersized class, missing source...)."""


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class StageAborted(RuntimeError):
    """Training produced NaN losses repeatedly; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint=None, metrics=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.metrics = metrics or []
