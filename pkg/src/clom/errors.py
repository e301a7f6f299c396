"""Exception hierarchy shared by every clom module."""


class ClomError(Exception):
    """Base class for all errors raised by clom."""


class DimensionError(ClomError):
    pass


class NonFiniteError(ClomError):
    """An operation produced NaN or Inf."""


class DegenerateNormError(ClomError):
    pass


class EmptyBatchError(ClomError):
    pass


class ContractError(ClomError):
    """A caller violated an operation's precondition."""


class LabelError(ClomError):
    pass


class DegenerateRelationsError(ClomError):
    """Average class relation is too close to 1 for the margin interpolation."""


class DivergenceError(ClomError):
    pass


class FrozenStateError(ClomError):
    pass


class DuplicateClassError(ClomError):
    pass


class SplitError(ClomError):
    pass


class DatasetFormatError(ClomError):
    pass


class CheckpointError(ClomError):
    pass


class ConfigError(ClomError):
    pass
