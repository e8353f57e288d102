class DaveError(Exception):
    """Base for every error raised by the toolkit."""


class ShapeError(DaveError, ValueError):
    pass


class NonFiniteError(DaveError, FloatingPointError):
    pass


class LabelError(DaveError, ValueError):
    pass


class CheckpointError(DaveError, ValueError):
    pass


class DatasetError(DaveError, ValueError):
    pass


class DivergenceError(DaveError, RuntimeError):
    pass


class ConfigError(DaveError, ValueError):
    pass
