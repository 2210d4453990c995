"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (model shapes, policy parameters, budgets)."""


class ShapeError(ValueError):
    """Tensor or grid shape violates an operation's preconditions."""


class FrozenEncodingError(RuntimeError):
    """Attempted mutation of a frozen quantized tensor's encodings."""


class ContractViolation(RuntimeError):
    """A hard runtime contract failed (losslessness, base-hash invariance)."""
