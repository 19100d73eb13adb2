"""Exception taxonomy shared across the package.

The classes mirror how failures surface at the command line: configuration
and contract violations are caller mistakes (exit code 2), data and format
problems come from the environment (exit code 3), and gradient-verification
failures get their own code (exit code 4) so scripted sweeps can tell a
broken build from a broken invocation.
"""


class BridgePressError(Exception):
    """Base class for every error this package raises on purpose."""

    exit_code = 1


class ConfigurationError(BridgePressError):
    """Invalid settings: bad flag values, conflicting options, missing specs."""

    exit_code = 2


class ContractError(BridgePressError):
    """A caller violated an API precondition."""

    exit_code = 2


class DimensionError(ContractError):
    """Operand shapes do not line up."""


class UnsupportedOperationError(ContractError):
    """The operation is well-formed but outside what this package supports."""


class ScheduleError(ConfigurationError):
    """A diffusion schedule violates its invariants."""


class DataError(BridgePressError):
    """Problems with stored datasets, containers, or manifests."""

    exit_code = 3


class FormatError(DataError):
    """A container's magic bytes or internal structure are wrong."""


class LengthError(DataError):
    """A container's declared sizes disagree with the bytes present."""


class UnsupportedVersionError(DataError):
    """A file was written by a newer format revision than this build reads."""


class ManifestError(DataError):
    """A manifest is missing, inconsistent, or references absent files."""


class DegenerateInputError(DataError):
    """An input is well-formed but has no usable content (e.g. all zeros)."""


class VerificationError(BridgePressError):
    """Gradient verification found a mismatch."""

    exit_code = 4
