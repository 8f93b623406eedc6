from pln.autodiff.tensor import ShapeError


class ConfigError(ValueError):
    """Configuration is inconsistent (stage sizes, head kind, lengths...)."""


class InputError(ValueError):
    """Caller passed an out-of-range index, token or interval."""


class ContractError(RuntimeError):
    """An op was used outside the situation it is defined for."""


__all__ = ["ShapeError", "ConfigError", "InputError", "ContractError"]
