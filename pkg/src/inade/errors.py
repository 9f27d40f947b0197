"""Exception hierarchy shared across the package.

CLI exit codes: config problems map to 2, data/file problems to 3,
numeric failures to 4 (see cli.py).
"""


class InadeError(Exception):
    """Base class for all package errors."""


class ConfigInvalid(InadeError):
    """A configuration value or config file failed validation."""


class DimensionMismatch(InadeError):
    """Two grids/images that must share dimensions do not."""


class ShapeMismatch(InadeError):
    """Tensor shapes are incompatible for the requested operation."""


class LabelOutOfRange(InadeError):
    """A semantic or instance label lies outside its declared range."""


class ClassOutOfRange(InadeError):
    """An instance-to-class table points at a nonexistent class."""


class InconsistentInstance(InadeError):
    """An instance label covers more than one semantic label."""


class EmptyInstanceLabel(InadeError):
    """A declared instance label occupies zero pixels."""


class PairMismatch(InadeError):
    """Reference and target label pairs differ where they must agree."""


class EpochOutOfRange(InadeError):
    """Requested epoch lies outside the configured schedule."""


class NonFiniteLoss(InadeError):
    """A training loss became NaN or infinite; training aborts."""


class IndexOutOfRange(InadeError):
    """A start index exceeds the available feature layers."""


class DegenerateSet(InadeError):
    """An image set is too small for a distribution-level statistic."""


class NoInstances(InadeError):
    """Instance-level evaluation was requested on data without instances."""


class CorruptFile(InadeError):
    """A file on disk is truncated or not in the expected format."""


class SchemaMismatch(InadeError):
    """A file carries an unsupported format version or field layout."""
