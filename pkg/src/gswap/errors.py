"""Exception taxonomy. Exit-code mapping lives in the CLI."""

from __future__ import annotations


class GswapError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(GswapError):
    """Caller-supplied values are malformed: dimension mismatches, bad ranges."""


class GeometryError(GswapError):
    """Mesh or triangle data is unusable (e.g. degenerate face)."""


class BindingError(GswapError):
    """A splat references a triangle that does not exist."""


class NumericError(GswapError):
    """Non-finite values where finite ones are required (NaN loss, inf params)."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class ContractError(GswapError):
    """API misuse: backward invoked on a scene that does not match its forward."""


class ConfigError(GswapError):
    """Config file unreadable or inconsistent."""


class IdentityPipelineError(GswapError):
    """An identity encoder failed; carries the encoder name."""

    def __init__(self, encoder_name: str, message: str):
        super().__init__(f"encoder '{encoder_name}': {message}")
        self.encoder_name = encoder_name


class ServiceError(GswapError):
    """Base for embedding-service client failures."""


class ServiceConnectionError(ServiceError):
    """Could not reach the embedding service (after retries)."""


class ServiceTimeoutError(ServiceError):
    """The embedding service did not answer in time."""


class ServiceProtocolError(ServiceError):
    """The embedding service answered with a malformed or mismatched line."""

    def __init__(self, message: str, line: str | None = None):
        super().__init__(message if line is None else f"{message}; offending line: {line!r}")
        self.line = line
