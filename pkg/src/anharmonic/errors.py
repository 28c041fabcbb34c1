"""Shared exception types."""


class BlowUpError(RuntimeError):
    """A dynamical quantity left the representable range (NaN/Inf)."""

    def __init__(self, message, *, time=None, step=None, site=None):
        super().__init__(message)
        self.time = time
        self.step = step
        self.site = site


class LambdaTooLargeError(ValueError):
    """exp(lambda*W) would overflow; retry with the suggested lambda."""

    def __init__(self, message, suggested):
        super().__init__(message)
        self.suggested = suggested


class ConfigError(ValueError):
    """Invalid, missing, or unknown configuration entry."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
