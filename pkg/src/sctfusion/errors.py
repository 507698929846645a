"""Exception hierarchy shared across the package.

Everything raised on purpose derives from :class:`SctFusionError` so callers
(the service layer in particular) can map failures to structured responses
without catching bare ``Exception``.
"""


class SctFusionError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SctFusionError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(SctFusionError, ValueError):
    """A configuration is structurally valid but semantically impossible."""


class DatasetError(SctFusionError):
    """Base class for on-disk dataset problems."""


class TruncatedPayloadError(DatasetError):
    """A payload file is shorter than the manifest says it must be."""


class ChecksumMismatchError(DatasetError):
    """A payload file's CRC-32C does not match the manifest."""


class ManifestConsistencyError(DatasetError):
    """Manifest and payload disagree structurally (sizes, shapes, values)."""


class CheckpointError(SctFusionError):
    """A checkpoint file is unreadable or inconsistent with its manifest."""


class NonFiniteGradientError(SctFusionError):
    """A gradient contained NaN/Inf; message names the parameter."""


class NonFiniteLossError(SctFusionError):
    """The training loss became NaN/Inf; message names epoch and batch."""


class NonDeterministicForwardError(SctFusionError):
    """A forward function re-evaluated to a different value during gradient checking."""
