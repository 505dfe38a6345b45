"""Deterministic analysis tools.

Tools never consult the model layer: they take concrete inputs, produce
ground-truth outputs, and fail with detailed diagnostics written for an LLM
consumer. A :class:`ToolError` message is the observation a worker agent
feeds back to the model verbatim.
"""


class ToolError(Exception):
    """Tool failure whose message is a diagnostic intended for the model."""


class SandboxUnavailableError(Exception):
    """Sandbox runtime misconfiguration: an operator error, not an analysis
    finding, so deliberately not a ToolError."""
