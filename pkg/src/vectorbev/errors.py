"""Exception types shared across the package."""


class VectorBevError(Exception):
    """Base class for all package errors."""


class ShapeError(VectorBevError):
    """Operands have incompatible shapes."""


class NumericsError(VectorBevError):
    """A tensor left the finite-value domain (NaN/Inf) at an op boundary."""


class InvalidCoordinate(VectorBevError):
    """A sampling coordinate is NaN."""


class InvalidTarget(VectorBevError):
    """A supervision target is outside its valid domain."""


class ContractError(VectorBevError):
    """A caller violated an API contract (non-scalar loss, broken group structure, ...)."""


class SceneGenError(VectorBevError):
    """Synthetic scene generation could not satisfy its constraints."""


class DatasetError(VectorBevError):
    """A dataset container is malformed. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int = -1):
        super().__init__(f"{message} (offset {offset})" if offset >= 0 else message)
        self.offset = offset


class ConfigError(VectorBevError):
    """A run configuration is invalid (unknown key, bad value, missing file)."""
