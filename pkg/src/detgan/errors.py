"""Shared exception types.

Rejected inputs (bad shapes, out-of-range values) raise plain ValueError;
the classes below cover the failure modes that callers handle differently.
"""


class ConfigurationError(Exception):
    """A component cannot be constructed from the given configuration
    (missing weights file, unknown mode, corpus too small, ...)."""


class CheckpointError(Exception):
    """A checkpoint is missing, malformed, or does not match the network;
    the message names the offending parameters."""


class NumericError(RuntimeError):
    """A training step produced a non-finite value and was aborted."""
