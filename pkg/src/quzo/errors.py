"""Exception types raised across the package."""


class QuzoError(Exception):
    pass


class ConfigurationError(QuzoError, ValueError):
    """Unsupported format, bad hyperparameter, or mismatched adapter rank."""


class InputError(QuzoError, ValueError):
    """Non-finite values or incompatible shapes handed to an operation."""


class RunError(QuzoError, RuntimeError):
    """A forward/backward pass or an optimizer step produced NaN or blew up."""


class IntegrityError(QuzoError, RuntimeError):
    """Weights failed to recover bit-exactly, or seeds no longer regenerate the same layout."""
