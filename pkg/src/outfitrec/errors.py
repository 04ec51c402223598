"""Exception hierarchy. Each family maps to a CLI exit code."""


class OutfitRecError(Exception):
    exit_code = 1


class ConfigError(OutfitRecError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes do not agree."""


class DataError(OutfitRecError):
    exit_code = 3


class DatasetFormatError(DataError):
    def __init__(self, section: str, message: str):
        super().__init__(f"[{section}] {message}")
        self.section = section


class UnknownUserError(DataError, KeyError):
    pass


class UnknownItemError(DataError, KeyError):
    pass


class AugmentationInapplicableError(DataError):
    pass


class MetricUndefinedError(DataError):
    pass


class NumericError(OutfitRecError, ArithmeticError):
    exit_code = 4


class NumericDegeneracyError(NumericError):
    pass


class TrainingDivergenceError(NumericError):
    pass
