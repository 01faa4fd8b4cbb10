"""Exception types shared across the toolkit.

The CLI maps these onto distinct exit codes, so subclass relationships
matter: anything file-format related derives from ``FormatError`` (an
I/O failure), anything configuration related from ``ConfigError``.
"""


class XNetError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(XNetError):
    """Tensor shapes are incompatible; the message names the offending axis."""


class LabelDomainError(XNetError):
    """A class label lies outside the expected range."""


class ConfigError(XNetError):
    """Invalid or inconsistent configuration (bad value, unknown key,
    fingerprint mismatch)."""


class StateError(XNetError):
    """An operation was called in the wrong order, e.g. backward before a
    training-mode forward."""


class FormatError(XNetError):
    """A file on disk is malformed. Messages carry a byte offset where
    the parser gave up."""


class SplitError(ConfigError):
    """The requested dataset split is impossible; the message lists the
    classes that cannot be placed."""


class NumericError(XNetError):
    """Non-finite values appeared where finite ones are required; the
    message names the layer that produced them."""


class UndefinedMetricError(XNetError):
    """A metric has no defined value on this input (e.g. AUC with a
    single-class ground truth, confidence of an empty assignment set)."""
