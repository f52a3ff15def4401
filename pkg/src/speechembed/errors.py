"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class InputTooShortError(ValueError):
    pass


class ResampleRequiredError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


class RankError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class NormalizationUnavailableError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class SingularityError(NumericError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class DegenerateTargetError(ValueError):
    pass


class TaskMismatchError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ClockError(RuntimeError):
    pass


class ModelFileError(ValueError):
    pass


class BadMagicError(ModelFileError):
    pass


class UnsupportedVersionError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass
