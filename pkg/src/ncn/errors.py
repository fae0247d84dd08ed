"""Exception types shared across the codec.

The CLI maps these onto exit codes: usage/IO problems exit 1,
missing capabilities exit 2, numeric failures exit 3.
"""


class CodecError(Exception):
    """Base class for all codec-specific failures."""


class BitstreamError(CodecError):
    """Malformed, truncated, or wrong-version bitstream/checkpoint data."""


class CapabilityError(CodecError):
    """A requested feature is unavailable (e.g. masking without LSM weights)."""


class NumericError(CodecError):
    """Non-finite values or numerically invalid inputs."""
